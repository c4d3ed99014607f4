"""Personal service discovery and invocation over plain HTTP.

A per-user broker names and launches personal services, a forwarding
proxy teaches an unmodified browser the extra redirection status codes,
and a small kit helps write the services themselves.
"""

__version__ = "0.1.0"
