# ---
# 基底クラス
# ---


class EvtailException(Exception):
    """独自例外の基底クラス"""

    def __init__(self, message):
        super().__init__(message)


# ---
# ワイルドカード
# ---


class UnexpectedException(EvtailException):
    """予期せぬ例外が発生したときの例外

    推定結果が不変条件を満たさなかった場合など、内部の契約違反を表す
    """

    def __init__(self, message):
        super().__init__(message)


# ---
# パラメータ・定義域関連
# ---


class ParameterDomainException(EvtailException):
    """パラメータや引数が定義域外だったときの例外"""

    def __init__(self, message):
        super().__init__(message)


class SupportException(ParameterDomainException):
    """値がGPDのサポート外だったときの例外

    strict指定時のみ送出される
    """

    def __init__(self, message):
        super().__init__(message)


class DimensionMismatchException(EvtailException):
    """配列の次元が一致しないときの例外"""

    def __init__(self, message):
        super().__init__(message)


# ---
# フィッティング関連
# ---


class FitException(EvtailException):
    """分布のフィッティングに失敗したときの例外"""

    def __init__(self, message, sample_count: int):
        super().__init__(message)
        self.sample_count = sample_count


class InsufficientDataException(EvtailException):
    """データ量が処理に必要な量に満たないときの例外"""

    def __init__(self, message, sample_count: int):
        super().__init__(message)
        self.sample_count = sample_count


# ---
# 数値計算・学習関連
# ---


class NumericalException(EvtailException):
    """損失が非有限になるなど、数値計算が破綻したときの例外"""

    def __init__(self, message):
        super().__init__(message)


class StaleTapeException(NumericalException):
    """パラメータ更新後に古いGradTapeで逆伝播しようとしたときの例外"""

    def __init__(self, message):
        super().__init__(message)


class TrainingDivergedException(NumericalException):
    """敵対的学習が発散したときの例外

    発散までの学習履歴をhistoryに保持する
    """

    def __init__(self, message, history: list):
        super().__init__(message)
        self.history = history


# ---
# 入出力・設定関連
# ---


class ConfigException(EvtailException):
    """設定値が不正だったときの例外"""

    def __init__(self, message):
        super().__init__(message)


class DataFormatException(EvtailException):
    """入力データの形式が不正だったときの例外

    rowはファイル上の行番号 (ヘッダを1行目とする)
    """

    def __init__(self, message, row: int | None = None):
        super().__init__(message)
        self.row = row


class RemoteTraceException(EvtailException):
    """リモートの測定データ取得に失敗したときの例外"""

    def __init__(self, message, status_code: int):
        super().__init__(message)
        self.status_code = status_code
