"""Optional run monitor: REST status and WebSocket event stream for long sweeps."""

import asyncio
import json
import logging
import threading
from collections import deque
from datetime import datetime
from typing import Any, Dict, Optional, Set

import uvicorn
from fastapi import FastAPI, WebSocket, WebSocketDisconnect


RECENT_ROWS = 50


class RunMonitor:
    """FastAPI server exposing the progress of a training run or sweep."""

    def __init__(self, config: Dict[str, Any], manifest: Optional[Dict[str, Any]] = None):
        """
        Initialize run monitor.

        Args:
            config: Monitor section with 'host' and 'port'
            manifest: Resolved configuration served at /api/config
        """
        self.logger = logging.getLogger(__name__)
        self.host = config["host"]
        self.port = config["port"]
        self.manifest = manifest or {}

        self.status_lock = threading.Lock()
        self.status: Dict[str, Any] = {
            "state": "idle",
            "mode": None,
            "started_at": None,
            "finished_at": None,
            "trace_records": 0,
            "last_trace": None,
            "geometries_done": 0,
            "selftest": [],
        }
        self.recent_rows = deque(maxlen=RECENT_ROWS)

        self.active_connections: Set[WebSocket] = set()
        self.loop: Optional[asyncio.AbstractEventLoop] = None

        self.app = FastAPI(title="risbeam run monitor")
        self._setup_routes()
        self.server_thread = None

    def _setup_routes(self):
        @self.app.get("/api/status")
        async def get_status():
            return self.snapshot()

        @self.app.get("/api/config")
        async def get_config():
            return self.manifest

        @self.app.websocket("/ws")
        async def websocket_endpoint(websocket: WebSocket):
            await websocket.accept()
            self.loop = asyncio.get_running_loop()
            self.active_connections.add(websocket)
            self.logger.info(f"WebSocket client connected. Total: {len(self.active_connections)}")
            try:
                await websocket.send_json({"type": "status_update", "data": self.snapshot()})
                while True:
                    try:
                        await asyncio.wait_for(websocket.receive_text(), timeout=1.0)
                    except asyncio.TimeoutError:
                        continue
            except WebSocketDisconnect:
                self.active_connections.discard(websocket)
                self.logger.info(f"WebSocket client disconnected. Total: {len(self.active_connections)}")

    def snapshot(self) -> Dict[str, Any]:
        with self.status_lock:
            status = dict(self.status)
            status["recent_rows"] = list(self.recent_rows)
        return status

    def record_event(self, event_type: str, data: Dict[str, Any]) -> None:
        """Fold one event into the status document."""
        now = datetime.now().isoformat()
        with self.status_lock:
            if event_type == "run_started":
                self.status.update(state="running", mode=data.get("mode"), started_at=now, finished_at=None)
            elif event_type == "trace":
                self.status["trace_records"] += 1
                self.status["last_trace"] = data
            elif event_type == "geometry_done":
                self.status["geometries_done"] += 1
                self.recent_rows.append(data)
            elif event_type == "selftest":
                self.status["selftest"].append(data)
            elif event_type == "run_finished":
                self.status.update(state="finished", finished_at=now, exit_status=data.get("status"))

    async def broadcast_event(self, event_type: str, data: Dict[str, Any]):
        """
        Broadcast event to all connected WebSocket clients.

        Args:
            event_type: run_started, trace, geometry_done, selftest or run_finished
            data: JSON-serializable payload
        """
        if not self.active_connections:
            return
        message = json.dumps({"type": event_type, "data": data, "timestamp": datetime.now().isoformat()})
        disconnected = set()
        for connection in list(self.active_connections):
            try:
                await connection.send_text(message)
            except Exception as e:
                self.logger.error(f"Error sending to WebSocket client: {e}")
                disconnected.add(connection)
        self.active_connections -= disconnected

    def broadcast_event_sync(self, event_type: str, data: Dict[str, Any]):
        """Event callback for the optimizer and sweep threads."""
        self.record_event(event_type, data)
        if self.active_connections and self.loop is not None:
            try:
                asyncio.run_coroutine_threadsafe(self.broadcast_event(event_type, data), self.loop)
            except RuntimeError as e:
                self.logger.error(f"Error broadcasting event: {e}")

    def start(self):
        """Start the server in a daemon thread."""
        self.logger.info(f"Starting run monitor on {self.host}:{self.port}")

        def run_server():
            uvicorn.run(self.app, host=self.host, port=self.port, log_level="warning")

        self.server_thread = threading.Thread(target=run_server, daemon=True)
        self.server_thread.start()
        self.logger.info(f"Run monitor available at http://{self.host}:{self.port}/api/status")

    def stop(self):
        # uvicorn has no clean programmatic shutdown here; the daemon thread ends with the process
        self.logger.info("Run monitor stopping...")
