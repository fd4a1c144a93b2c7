import json
import socket
import threading

import numpy as np
import pytest
import requests

from eigenshape import cli, dataset as ds, fem, geometry, pixelize, service
from eigenshape.models import build_cnn, build_fno

SQUARE_SHAPE = {"kind": "polygon", "points": [[0, 0], [1, 0], [1, 1], [0, 1]]}


@pytest.fixture(scope="module")
def server(tmp_path_factory):
    root = tmp_path_factory.mktemp("service")
    cnn = build_cnn(32, seed=1)
    cnn.forward(np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32),
                train=True)  # init running stats
    ds.write_checkpoint(cnn, {"eig_index": 1, "detailed": True, "align": True},
                        str(root / "cnn_1.ckpt"))
    fno = build_fno(32, seed=2)
    ds.write_checkpoint(fno, {"eig_index": 1, "detailed": True, "align": True},
                        str(root / "fno_1.ckpt"))
    srv = service.make_server(str(root), 0, fem_h=0.05, threads=2)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{srv.server_port}"
    yield {"base": base, "dir": str(root), "server": srv}
    srv.shutdown()
    srv.server_close()


class TestHealth:
    def test_ok(self, server):
        r = requests.get(server["base"] + "/v1/health")
        assert r.status_code == 200
        body = r.json()
        assert body["status"] == "ok"
        assert body["uptime_s"] >= 0
        from eigenshape import __version__
        assert body["versions"]["eigenshape"] == __version__

    def test_503_while_loading(self, server):
        srv = server["server"]
        srv.ready = False
        try:
            assert requests.get(server["base"] + "/v1/health").status_code == 503
        finally:
            srv.ready = True

    def test_cors_headers(self, server):
        r = requests.get(server["base"] + "/v1/health")
        assert r.headers["Access-Control-Allow-Origin"] == "*"


class TestModels:
    def test_inventory(self, server):
        r = requests.get(server["base"] + "/v1/models")
        assert r.status_code == 200
        entries = r.json()
        assert len(entries) == 2
        tasks = {e["task"] for e in entries}
        assert tasks == {"eigenvalue", "eigenfunction"}
        for e in entries:
            assert len(e["digest"]) == 64

    def test_digest_tracks_bytes(self, server, tmp_path):
        import hashlib

        entry = requests.get(server["base"] + "/v1/models").json()[0]
        path = f"{server['dir']}/{entry['id']}.ckpt"
        assert hashlib.sha256(open(path, 'rb').read()).hexdigest() == entry["digest"]

    def test_empty_dir(self, tmp_path):
        registry = service.ModelRegistry(str(tmp_path))
        assert registry.entries == []


class TestPredict:
    def test_eigenvalue_and_transform(self, server):
        body = {"shape": SQUARE_SHAPE, "tasks": {"eigenvalues": [1]}}
        r = requests.post(server["base"] + "/v1/predict", json=body)
        assert r.status_code == 200
        payload = r.json()
        assert payload["transform"]["scale"] == pytest.approx(1 - 2 / 32)
        ev = payload["eigenvalues"]["1"]
        assert ev["original"] == pytest.approx(ev["canonical"] * (1 - 2 / 32) ** 2)
        assert len(payload["canonical_image"]) == 32 * 32

    def test_eigenfunction_raster(self, server):
        body = {"shape": SQUARE_SHAPE, "tasks": {"eigenfunctions": [1]}}
        r = requests.post(server["base"] + "/v1/predict", json=body)
        assert r.status_code == 200
        assert len(r.json()["rasters"]["1"]) == 32 * 32

    def test_concurrent_identical_requests(self, server):
        body = {"shape": SQUARE_SHAPE, "tasks": {"eigenvalues": [1]}}
        results = [None, None]

        def hit(i):
            results[i] = requests.post(server["base"] + "/v1/predict", json=body).text

        threads = [threading.Thread(target=hit, args=(i,)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results[0] == results[1]

    def test_ground_truth_matches_direct_fem(self, server):
        body = {"shape": SQUARE_SHAPE, "tasks": {"eigenvalues": [1]},
                "want_ground_truth": True}
        r = requests.post(server["base"] + "/v1/predict", json=body)
        assert r.status_code == 200
        payload = r.json()
        gt = payload["ground_truth"]["eigenvalues"]["1"]
        shape = geometry.shape_from_points(SQUARE_SHAPE["points"], "polygon")
        img = pixelize.canonicalize(shape, 32, detailed=True, align=True)
        boundary = img.transform.apply(geometry.flatten_boundary(shape, 1e-3))
        mesh = fem.triangulate(boundary, 0.05)
        lam = fem.solve_eigs(fem.assemble(mesh), 1)[0].lam
        assert gt["canonical"] == lam  # same code path, bitwise
        assert "fem" in payload["timing_ms"]

    def test_error_codes(self, server):
        base = server["base"]
        r = requests.post(base + "/v1/predict", data=b"{not json",
                          headers={"Content-Type": "application/json"})
        assert r.status_code == 400
        r = requests.post(base + "/v1/predict", json={"tasks": {}})
        assert r.status_code == 400
        bow = {"kind": "polygon", "points": [[0, 0], [1, 1], [1, 0], [0, 1]]}
        r = requests.post(base + "/v1/predict",
                          json={"shape": bow, "tasks": {"eigenvalues": [1]}})
        assert r.status_code == 422
        r = requests.post(base + "/v1/predict",
                          json={"shape": SQUARE_SHAPE, "tasks": {"eigenvalues": [5]}})
        assert r.status_code == 404
        assert "error" in r.json()

    def test_matches_cli_predict(self, server, tmp_path, capsys):
        body = {"shape": SQUARE_SHAPE, "tasks": {"eigenvalues": [1]}}
        http_val = requests.post(server["base"] + "/v1/predict", json=body).json()
        shape_file = str(tmp_path / "sq.json")
        with open(shape_file, "w") as f:
            json.dump(SQUARE_SHAPE, f)
        rc = cli.main(["predict", "--model", f"{server['dir']}/cnn_1.ckpt",
                       "--shape", shape_file])
        assert rc == 0
        cli_val = json.loads(capsys.readouterr().out)
        assert cli_val["lambda_canonical"] == http_val["eigenvalues"]["1"]["canonical"]
        assert cli_val["lambda_original"] == http_val["eigenvalues"]["1"]["original"]

    def test_image_input(self, server):
        img = [0.0] * (32 * 32)
        body = {"image": img, "tasks": {"eigenvalues": [1]}}
        r = requests.post(server["base"] + "/v1/predict", json=body)
        assert r.status_code == 200
        body["want_ground_truth"] = True
        r = requests.post(server["base"] + "/v1/predict", json=body)
        assert r.status_code == 400  # ground truth needs a boundary


class TestPortBusy:
    def test_exit_8(self, tmp_path):
        blocker = socket.socket()
        blocker.bind(("127.0.0.1", 0))
        port = blocker.getsockname()[1]
        blocker.listen(1)
        try:
            rc = cli.main(["serve", "--models", str(tmp_path), "--port", str(port)])
            assert rc == 8
        finally:
            blocker.close()

    def test_missing_dir_exit_6(self, tmp_path):
        rc = cli.main(["serve", "--models", str(tmp_path / "nope"), "--port", "0"])
        assert rc == 6
