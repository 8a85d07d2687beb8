"""CAPODAZ: capability-token authorization service and load-benchmark harness.

Subpackages/modules map to the artifact's parts: `codec` (CBOR/base64url),
`tokens` (JWT/CWT issuance, grants), `policy` (PAP/PIP/PDP/PEP), `registrar`
(token table), `service` (HTTP surface), `bench` (workload harness), `cli`.
"""

__version__ = "0.1.0"
