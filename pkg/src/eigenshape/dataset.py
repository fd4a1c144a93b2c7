"""Bit-exact dataset and checkpoint persistence, plus the generation driver."""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import fem, geometry, pixelize
from .models import CNNModel, FNOModel, build_cnn, build_fno, census

RECORD_MAGIC = b"EIGR"
CHECKPOINT_MAGIC = b"EIGC"
FORMAT_VERSION = 1
NORMALIZATION_SCALE = "d"  # ||raster||_2 = d


class ChecksumMismatch(Exception):
    pass


class VersionUnsupported(Exception):
    pass


class TruncatedRecord(Exception):
    pass


class CensusMismatch(Exception):
    """Checkpoint tensors do not match the architecture's parameter census."""


@dataclass
class EigenRecord:
    image: np.ndarray        # (d, d) float32
    mask: np.ndarray         # (d, d) float32 (0/1)
    eigenvalues: np.ndarray  # (k,) float32 ascending
    rasters: np.ndarray      # (k, d, d) float32, ||.||_2 = d each
    scale: float             # canonicalization scale s
    gaps: np.ndarray         # (k,) distance to the nearest neighboring eigenvalue
    kind: str = ""           # smooth | polygon (manifest only)
    transform: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.image.shape[0]

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]


def record_to_bytes(rec: EigenRecord) -> bytes:
    head = RECORD_MAGIC + struct.pack("<III", FORMAT_VERSION, rec.d, rec.k)
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes()
        for a in (rec.image, rec.mask, rec.eigenvalues, rec.rasters,
                  np.float32(rec.scale), rec.gaps)
    )
    return head + payload


def record_from_bytes(blob: bytes) -> EigenRecord:
    if len(blob) < 16:
        raise TruncatedRecord(f"blob of {len(blob)} bytes has no header")
    if blob[:4] != RECORD_MAGIC:
        raise VersionUnsupported(f"bad magic {blob[:4]!r}")
    version, d, k = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version}")
    expected = 16 + 4 * (d * d + d * d + k + k * d * d + 1 + k)
    if len(blob) != expected:
        raise TruncatedRecord(f"expected {expected} bytes, got {len(blob)}")
    f = np.frombuffer(blob, dtype="<f4", offset=16)
    o = 0
    image = f[o:o + d * d].reshape(d, d); o += d * d
    mask = f[o:o + d * d].reshape(d, d); o += d * d
    eigenvalues = f[o:o + k]; o += k
    rasters = f[o:o + k * d * d].reshape(k, d, d); o += k * d * d
    scale = float(f[o]); o += 1
    gaps = f[o:o + k]
    return EigenRecord(image=image.copy(), mask=mask.copy(),
                       eigenvalues=eigenvalues.copy(), rasters=rasters.copy(),
                       scale=scale, gaps=gaps.copy())


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_dataset(records: list[EigenRecord], manifest: dict, path: str) -> None:
    """Directory layout: manifest.json plus records/NNNNN.eigr, all atomic."""
    os.makedirs(os.path.join(path, "records"), exist_ok=True)
    manifest = dict(manifest)
    entries = []
    for i, rec in enumerate(records):
        blob = record_to_bytes(rec)
        name = f"{i:05d}.eigr"
        _atomic_write(os.path.join(path, "records", name), blob)
        entries.append({
            "file": f"records/{name}",
            "crc32": zlib.crc32(blob),
            "kind": rec.kind,
            "scale": float(rec.scale),
            "transform": rec.transform,
        })
    manifest["records"] = entries
    _atomic_write(os.path.join(path, "manifest.json"),
                  json.dumps(manifest, indent=1, sort_keys=True).encode())


def read_dataset(path: str) -> tuple[list[EigenRecord], dict]:
    with open(os.path.join(path, "manifest.json"), "rb") as f:
        manifest = json.loads(f.read())
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionUnsupported(f"manifest version {manifest.get('version')}")
    records = []
    for entry in manifest["records"]:
        with open(os.path.join(path, entry["file"]), "rb") as f:
            blob = f.read()
        if zlib.crc32(blob) != entry["crc32"]:
            raise ChecksumMismatch(entry["file"])
        rec = record_from_bytes(blob)
        rec.kind = entry.get("kind", "")
        rec.transform = entry.get("transform", {})
        records.append(rec)
    return records, manifest


def stack_arrays(records: list[EigenRecord]):
    """(images (N,1,d,d), eigenvalues (N,k), rasters (N,k,d,d), masks (N,d,d))."""
    images = np.stack([r.image for r in records])[:, None, :, :]
    lams = np.stack([r.eigenvalues for r in records])
    rasters = np.stack([r.rasters for r in records])
    masks = np.stack([r.mask for r in records])
    return images, lams, rasters, masks


# ---------------------------------------------------------------------------
# generation

def generate_record(rng: np.random.Generator, kind: str, d: int, k: int, h: float,
                    detailed: bool = True, align: bool = True, sigma: int = 8,
                    n_range=(5, 12), c: float = 0.15, epsilon: float = 0.0,
                    r: float = 0.5, flatten_tol: float = 1e-3,
                    audit: bool = False) -> tuple[EigenRecord, int]:
    """One domain end to end; returns (record, rejected-shape count)."""
    rejected = 0
    while True:
        shape, rej = geometry.random_shape(rng, kind, n_range=n_range, c=c,
                                           epsilon=epsilon, r=r)
        rejected += rej
        img = pixelize.canonicalize(shape, d, detailed=detailed, align=align,
                                    sigma=sigma, flatten_tol=flatten_tol)
        boundary = img.transform.apply(geometry.flatten_boundary(shape, flatten_tol))
        try:
            mesh = fem.triangulate(boundary, h)
            pairs = fem.solve_eigs(fem.assemble(mesh), k + 1)
        except (fem.MeshFailure, fem.ConvergenceFailure):
            rejected += 1
            continue
        break
    lams = np.array([p.lam for p in pairs])
    if audit:
        pair = fem.assemble(mesh)
        vecs = np.stack([p.vec for p in pairs[:k]], axis=1)
        gram = vecs.T @ (pair.M_mass @ vecs)
        if not np.allclose(gram, np.eye(k), atol=1e-8):
            raise fem.ConvergenceFailure("M-orthonormality audit failed")
    rasters = np.empty((k, d, d), dtype=np.float32)
    for i in range(k):
        raw = fem.rasterize_eigenfunction(mesh, pairs[i], d)
        rasters[i] = fem.normalize_and_sign(raw).astype(np.float32)
    diffs = np.diff(lams)
    gaps = np.empty(k)
    for i in range(k):
        left = diffs[i - 1] if i > 0 else np.inf
        gaps[i] = min(left, diffs[i])
    return EigenRecord(
        image=img.values.astype(np.float32),
        mask=(img.values > 0).astype(np.float32),
        eigenvalues=lams[:k].astype(np.float32),
        rasters=rasters,
        scale=float(np.float32(img.transform.scale)),
        gaps=gaps.astype(np.float32),
        kind=kind,
        transform=img.transform.summary(),
    ), rejected


def generate_dataset(n: int, d: int = 32, k: int = 3, h: float = 0.02,
                     smooth_fraction: float = 0.5, detailed: bool = True,
                     align: bool = True, sigma: int = 8, seed: int = 0,
                     n_range=(5, 12), c: float = 0.15, epsilon: float = 0.0,
                     r: float = 0.5, audit: bool = False,
                     progress: bool = False) -> tuple[list[EigenRecord], dict]:
    """n records with a deterministic per-record seed tree; byte-stable output."""
    n_smooth = int(round(n * smooth_fraction))
    kinds = ["smooth"] * n_smooth + ["polygon"] * (n - n_smooth)
    seeds = np.random.SeedSequence(seed).spawn(n)
    records = []
    rejected = 0
    for i, (kind, ss) in enumerate(zip(kinds, seeds)):
        rec, rej = generate_record(np.random.default_rng(ss), kind, d, k, h,
                                   detailed=detailed, align=align, sigma=sigma,
                                   n_range=n_range, c=c, epsilon=epsilon, r=r,
                                   audit=audit)
        records.append(rec)
        rejected += rej
        if progress and (i + 1) % 100 == 0:
            print(f"[generate] {i + 1}/{n} records ({rejected} rejected)", flush=True)
    manifest = {
        "version": FORMAT_VERSION,
        "d": d,
        "k": k,
        "counts": {"smooth": n_smooth, "polygon": n - n_smooth},
        "params": {"n_range": list(n_range), "c": c, "epsilon": epsilon, "r": r,
                   "sigma": sigma, "h": h},
        "detailed": detailed,
        "align": align,
        "normalization": NORMALIZATION_SCALE,
        "seed": seed,
        "rejected": rejected,
    }
    return records, manifest


# ---------------------------------------------------------------------------
# checkpoints

def write_checkpoint(model, header: dict, path: str) -> None:
    """CHECKPOINT_MAGIC + u32 header length + header JSON + named tensors."""
    header = dict(header)
    header.setdefault("architecture", model.architecture)
    header.setdefault("d", model.d)
    header.setdefault("seed", model.seed)
    blob = [CHECKPOINT_MAGIC]
    hjson = json.dumps(header, sort_keys=True).encode()
    blob.append(struct.pack("<I", len(hjson)))
    blob.append(hjson)
    tensors = [(p.name, p.value) for p in model.params()]
    tensors += sorted(model.buffers().items())
    for name, value in tensors:
        nb = name.encode()
        blob.append(struct.pack("<I", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<I", value.ndim))
        blob.append(struct.pack(f"<{value.ndim}I", *value.shape))
        blob.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(blob))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedRecord(f"checkpoint truncated reading {what}")
    return data


def read_checkpoint_tensors(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise VersionUnsupported("bad checkpoint magic")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, hlen, "header"))
        tensors: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise TruncatedRecord("checkpoint truncated reading tensor name length")
            (nlen,) = struct.unpack("<I", raw)
            name = _read_exact(f, nlen, "tensor name").decode()
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "tensor shape"))
            count = int(np.prod(shape)) if shape else 1
            payload = _read_exact(f, 4 * count, f"tensor {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return header, tensors


def build_from_header(header: dict):
    arch = header.get("architecture", "")
    if arch.startswith("cnn"):
        return build_cnn(header["d"], seed=header.get("seed", 0),
                         out_dim=header.get("out_dim", 1))
    if arch.startswith("fno"):
        return build_fno(header["d"], seed=header.get("seed", 0))
    raise CensusMismatch(f"unknown architecture {arch!r}")


def read_checkpoint(path: str):
    """Rebuild the model and load tensors; any census deviation is an error."""
    header, tensors = read_checkpoint_tensors(path)
    model = build_from_header(header)
    expected = census(model)
    got = {name: tuple(v.shape) for name, v in tensors.items()}
    if expected != got:
        missing = set(expected) - set(got)
        extra = set(got) - set(expected)
        bad = {n for n in set(expected) & set(got) if expected[n] != got[n]}
        raise CensusMismatch(
            f"missing={sorted(missing)} extra={sorted(extra)} shape-mismatch={sorted(bad)}"
        )
    for p in model.params():
        p.value[...] = tensors[p.name]
    buffers = {name: tensors[name] for name in model.buffers()}
    model.load_buffers(buffers)
    return model, header
