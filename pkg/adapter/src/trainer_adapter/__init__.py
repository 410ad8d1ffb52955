"""Reference external trainer speaking the segcotrain file protocol.

The adapter is an independent process: it shares no code with the
orchestrator, only the documented session-directory protocol (canonical JSON
request/response records, PNG label maps, raw float32 rasters with JSON
sidecar headers). It ships a minimal linear-softmax per-pixel backend for
conformance testing and serves as the hook point for attaching real
gradient-based segmentation trainers (implement the Backend interface in
`linear.py` and register it in `serve.py`).
"""

__version__ = "0.1.0"
