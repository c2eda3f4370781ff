from .remote import RemoteTraceClient, RemoteTraceConfig, is_remote
