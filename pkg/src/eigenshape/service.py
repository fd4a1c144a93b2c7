"""HTTP inference and ground-truth service (stdlib http.server, JSON payloads)."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import __version__, dataset as ds, fem, geometry, pixelize, training

API_PREFIX = "/v1"


class BadRequest(Exception):
    status = 400


class InvalidShape(Exception):
    status = 422


class UnknownIndex(Exception):
    status = 404


class ModelRegistry:
    """Immutable view of the checkpoints in a directory."""

    def __init__(self, models_dir: str):
        self.models_dir = models_dir
        self.eigenvalue: dict[int, tuple] = {}
        self.eigenfunction: dict[int, tuple] = {}
        self.entries: list[dict] = []
        self.d: int | None = None
        self.detailed = True
        self.align = True
        for name in sorted(os.listdir(models_dir)):
            if not name.endswith(".ckpt"):
                continue
            path = os.path.join(models_dir, name)
            model, header = ds.read_checkpoint(path)
            with open(path, "rb") as f:
                digest = hashlib.sha256(f.read()).hexdigest()
            idx = int(header.get("eig_index", 1))
            arch = header["architecture"]
            entry = {
                "id": name[:-5],
                "architecture": arch,
                "d": header["d"],
                "eig_index": idx,
                "task": "eigenvalue" if arch.startswith("cnn") else "eigenfunction",
                "digest": digest,
            }
            self.entries.append(entry)
            if self.d is None:
                self.d = header["d"]
                self.detailed = header.get("detailed", True)
                self.align = header.get("align", True)
            elif self.d != header["d"]:
                raise ValueError(f"mixed resolutions in {models_dir}")
            if arch.startswith("cnn"):
                self.eigenvalue[idx] = (model, header)
            else:
                self.eigenfunction[idx] = (model, header)

    def inventory_ids(self) -> list[str]:
        return [e["id"] for e in self.entries]


def _canonicalize_request(body: dict, registry: ModelRegistry):
    d = registry.d or 32
    if "shape" in body and body["shape"] is not None:
        spec = body["shape"]
        try:
            shape = geometry.shape_from_points(
                spec["points"], kind=spec.get("kind", "polygon"),
                epsilon=float(spec.get("epsilon", 0.0)), r=float(spec.get("r", 0.5)))
        except geometry.SelfIntersecting as exc:
            raise InvalidShape(str(exc)) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise BadRequest(f"malformed shape: {exc}") from exc
        img = pixelize.canonicalize(shape, d, detailed=registry.detailed,
                                    align=registry.align)
        boundary = img.transform.apply(geometry.flatten_boundary(shape, 1e-3))
        return img.values, img.transform, boundary
    if "image" in body and body["image"] is not None:
        flat = np.asarray(body["image"], dtype=float)
        if flat.size != d * d:
            raise BadRequest(f"image must have {d * d} values")
        return flat.reshape(d, d), pixelize.CanonicalTransform(), None
    raise BadRequest("request needs a shape or an image")


class Api:
    def __init__(self, registry: ModelRegistry, fem_h: float, threads: int):
        self.registry = registry
        self.fem_h = fem_h
        self.fem_gate = threading.Semaphore(max(1, threads))
        self.started = time.time()

    def health(self) -> dict:
        import numpy
        import scipy

        return {
            "status": "ok",
            "uptime_s": time.time() - self.started,
            "versions": {"eigenshape": __version__, "numpy": numpy.__version__,
                         "scipy": scipy.__version__},
        }

    def models(self) -> list[dict]:
        return self.registry.entries

    def predict(self, body: dict) -> dict:
        if not isinstance(body, dict):
            raise BadRequest("body must be a JSON object")
        tasks = body.get("tasks") or {}
        ev_idx = [int(i) for i in tasks.get("eigenvalues", [])]
        ef_idx = [int(i) for i in tasks.get("eigenfunctions", [])]
        if not ev_idx and not ef_idx:
            raise BadRequest("tasks must request at least one index")
        for i in ev_idx:
            if i not in self.registry.eigenvalue:
                raise UnknownIndex(f"no eigenvalue model for index {i}")
        for i in ef_idx:
            if i not in self.registry.eigenfunction:
                raise UnknownIndex(f"no eigenfunction model for index {i}")
        t0 = time.time()
        values, transform, boundary = _canonicalize_request(body, self.registry)
        t1 = time.time()
        batch = values[None, None].astype(np.float32)
        s = transform.scale
        eigenvalues = {}
        for i in ev_idx:
            model, _ = self.registry.eigenvalue[i]
            lam = float(training.predict_eigenvalues(model, batch)[0])
            eigenvalues[str(i)] = {
                "canonical": lam,
                "original": pixelize.rescale_eigenvalue(lam, s),
            }
        rasters = {}
        for i in ef_idx:
            model, _ = self.registry.eigenfunction[i]
            raster = training.predict_eigenfunctions(model, batch)[0]
            rasters[str(i)] = np.asarray(raster, dtype=float).ravel().tolist()
        t2 = time.time()
        response = {
            "canonical_image": np.asarray(values, dtype=float).ravel().tolist(),
            "transform": transform.summary(),
            "eigenvalues": eigenvalues,
            "rasters": rasters,
            "timing_ms": {"canonicalize": (t1 - t0) * 1e3, "forward": (t2 - t1) * 1e3},
        }
        if body.get("want_ground_truth"):
            if boundary is None:
                raise BadRequest("ground truth needs a shape, not a raw image")
            with self.fem_gate:
                t3 = time.time()
                k = max(ev_idx + ef_idx)
                mesh = fem.triangulate(boundary, self.fem_h)
                pairs = fem.solve_eigs(fem.assemble(mesh), k)
                gt_ev = {}
                for i in sorted(set(ev_idx + ef_idx)):
                    lam = pairs[i - 1].lam
                    gt_ev[str(i)] = {"canonical": lam,
                                     "original": pixelize.rescale_eigenvalue(lam, s)}
                gt_rasters = {}
                d = self.registry.d or values.shape[0]
                for i in ef_idx:
                    raw = fem.rasterize_eigenfunction(mesh, pairs[i - 1], d)
                    gt_rasters[str(i)] = fem.normalize_and_sign(raw).ravel().tolist()
                response["ground_truth"] = {"eigenvalues": gt_ev, "rasters": gt_rasters}
                response["timing_ms"]["fem"] = (time.time() - t3) * 1e3
        return response


class Handler(BaseHTTPRequestHandler):
    api: Api  # set on the server class
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, status: int, payload) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.end_headers()
        self.wfile.write(body)

    def do_OPTIONS(self):
        self._send(204, {})

    def do_GET(self):
        if not getattr(self.server, "ready", True):
            self._send(503, {"status": "loading"})
            return
        if self.path == f"{API_PREFIX}/health":
            self._send(200, self.server.api.health())
        elif self.path == f"{API_PREFIX}/models":
            self._send(200, self.server.api.models())
        else:
            self._send(404, {"error": f"unknown path {self.path}"})

    def do_POST(self):
        if not getattr(self.server, "ready", True):
            self._send(503, {"status": "loading"})
            return
        if self.path != f"{API_PREFIX}/predict":
            self._send(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, json.JSONDecodeError) as exc:
            self._send(400, {"error": f"bad JSON: {exc}"})
            return
        try:
            self._send(200, self.server.api.predict(body))
        except (BadRequest, InvalidShape, UnknownIndex) as exc:
            self._send(exc.status, {"error": str(exc)})
        except Exception as exc:  # structured 500 body
            self._send(500, {"error": f"{type(exc).__name__}: {exc}"})


class Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, addr, api: Api, ready: bool = True):
        super().__init__(addr, Handler)
        self.api = api
        self.registry = api.registry
        self.ready = ready


def make_server(models_dir: str, port: int, fem_h: float = 0.02,
                threads: int = 1, host: str = "127.0.0.1") -> Server:
    registry = ModelRegistry(models_dir)
    return Server((host, port), Api(registry, fem_h, threads))
