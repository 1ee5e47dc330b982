"""Export per-group quantization statistics from a pretrained checkpoint.

Loads a TorchScript module mapping an (L, E_in) float sequence to an
(L, E_out) sequence, runs calibration batches, accumulates gradient
variances with the same PCA-projection/EMA semantics the desk-scale
calibrator uses, and writes the quantizer toolkit's JSON stats
interchange.  The toolkit is consumed only through that file format,
never imported.

Group layout mirrors the toolkit's planner: for a weight stored as
(out, in), each output channel is a line and the input dimensions are cut
into M = ceil(in / group_size) score-sorted, size-balanced buckets, one
GroupStats record per (channel, bucket).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import torch

# Shared calibration constants; keep in lockstep with the toolkit's
# calibrate module so desk-scale and checkpoint-scale statistics agree.
ALPHA = 0.1
PCA_K = 16
TOKEN_TARGET = 17
DEFAULT_B_MAX = 8


class ExportError(RuntimeError):
    pass


def load_checkpoint(path: str | Path) -> torch.jit.ScriptModule:
    try:
        model = torch.jit.load(str(path), map_location="cpu")
    except (OSError, RuntimeError, ValueError) as exc:
        raise ExportError(f"cannot load checkpoint {path}: {exc}") from exc
    model.eval()
    return model


def parse_calib_source(source: str, e_in: int) -> list[torch.Tensor]:
    """``synthetic:seed=S,samples=N,tokens=L`` or a path to a .pt tensor
    of shape (samples, tokens, width)."""
    if source.startswith("synthetic:"):
        opts = {}
        for part in source[len("synthetic:") :].split(","):
            key, _, value = part.partition("=")
            opts[key.strip()] = int(value)
        seed = opts.get("seed", 0)
        samples = opts.get("samples", 8)
        tokens = opts.get("tokens", 34)
        gen = torch.Generator().manual_seed(seed)
        return [
            torch.randn(tokens, e_in, generator=gen, dtype=torch.float32)
            for _ in range(samples)
        ]
    data = torch.load(source, map_location="cpu", weights_only=True)
    if data.dim() != 3 or data.shape[2] != e_in:
        raise ExportError(
            f"calibration tensor must be (samples, tokens, {e_in}); got {tuple(data.shape)}"
        )
    return [data[i].to(torch.float32) for i in range(data.shape[0])]


def token_selection(length: int, target: int = TOKEN_TARGET) -> torch.Tensor:
    stride = max(1, math.ceil(length / target))
    return torch.arange(0, length, stride)


def _target_weights(model) -> list[tuple[str, torch.nn.Parameter]]:
    """Trainable 2D weights; frozen layers stay out of the stats file."""
    out = []
    for name, param in model.named_parameters():
        if param.dim() == 2 and param.requires_grad:
            out.append((name, param))
    if not out:
        raise ExportError("checkpoint exposes no trainable 2D weights")
    return out


def _bucket_plan(weight: torch.Tensor, group_size: int) -> list[torch.Tensor]:
    """Input dimensions sorted by row score and cut into balanced buckets."""
    n_in = weight.shape[1]
    m = max(1, math.ceil(n_in / group_size))
    scores = torch.mean(weight.detach() ** 2, dim=0)
    order = torch.argsort(scores, stable=True)
    base, extra = divmod(n_in, m)
    buckets, start = [], 0
    for b in range(m):
        size = base + (1 if b < extra else 0)
        buckets.append(torch.sort(order[start : start + size]).values)
        start += size
    return buckets


def _pca_basis(outputs: torch.Tensor, k: int) -> torch.Tensor:
    centered = outputs - outputs.mean(dim=0, keepdim=True)
    cov = centered.T @ centered / outputs.shape[0]
    _, vecs = torch.linalg.eigh(cov.to(torch.float64))  # ascending
    u = vecs.flip(1)[:, :k]
    for j in range(u.shape[1]):
        i = int(torch.argmax(torch.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
    return u.to(torch.float32)


def export_stats(
    checkpoint: str | Path,
    calib_source: str,
    group_size: int,
    rate: float,
    out_path: str | Path,
    b_max: int = DEFAULT_B_MAX,
) -> Path:
    """Write the stats interchange file for a checkpoint; returns its path.

    Deterministic: the same checkpoint, calibration source, and options
    produce byte-identical output.
    """
    if group_size < 1:
        raise ExportError("group size must be positive")
    if not 0 <= rate <= b_max:
        raise ExportError(f"rate outside [0, {b_max}]")
    torch.manual_seed(0)
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model = load_checkpoint(checkpoint)
        weights = _target_weights(model)
        e_in = weights[0][1].shape[1]
        calib = parse_calib_source(calib_source, e_in)

        with torch.no_grad():
            outputs = torch.cat([model(x) for x in calib], dim=0)
        if not torch.isfinite(outputs).all():
            raise ExportError("NaN statistics: model outputs are not finite")
        e_out = outputs.shape[1]
        u_basis = _pca_basis(outputs, min(PCA_K, e_out))

        buckets = {name: _bucket_plan(p, group_size) for name, p in weights}
        g2 = {
            name: torch.zeros(len(buckets[name]) * p.shape[0], dtype=torch.float64)
            for name, p in weights
        }

        for j, x in enumerate(calib):
            sel = token_selection(x.shape[0])
            u = u_basis[:, j % u_basis.shape[1]]
            scale = e_out * (x.shape[0] / len(sel))
            model.zero_grad(set_to_none=True)
            z = model(x)
            (z[sel] @ u).sum().backward()
            for name, param in weights:
                if param.grad is None:
                    raise ExportError(f"no gradient reached weight {name}")
                sq = (param.grad.detach().to(torch.float64) ** 2) * scale
                per_group = torch.stack(
                    [sq[:, b].mean(dim=1) for b in buckets[name]], dim=1
                ).reshape(-1)
                if not torch.isfinite(per_group).all():
                    raise ExportError(f"NaN statistics while processing weight {name}")
                g2[name] = (1.0 - ALPHA) * g2[name] + ALPHA * per_group

        groups = []
        for name, param in weights:
            w = param.detach().to(torch.float64)
            for line in range(w.shape[0]):
                for b, bucket in enumerate(buckets[name]):
                    vals = w[line, bucket]
                    s2 = float(torch.var(vals, unbiased=False))
                    groups.append(
                        {
                            "id": f"{name}.c{line}.m{b}",
                            "P": int(bucket.numel()),
                            "G2": float(g2[name][line * len(buckets[name]) + b]),
                            "S2": max(s2, sys.float_info.min),
                            "mu": float(torch.mean(vals)),
                            "dist": "Gaussian",
                        }
                    )
    finally:
        torch.set_num_threads(n_threads)

    doc = {"rate": rate, "b_max": b_max, "groups": groups}
    out_path = Path(out_path)
    out_path.write_text(json.dumps(doc) + "\n")
    return out_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="radio-export", description="export checkpoint stats for the quantizer"
    )
    parser.add_argument("--checkpoint", required=True, help="TorchScript module path")
    parser.add_argument(
        "--calib",
        default="synthetic:seed=0,samples=8,tokens=34",
        help="synthetic:seed=S,samples=N,tokens=L or a (N,L,E) .pt tensor",
    )
    parser.add_argument("--group-size", type=int, default=512)
    parser.add_argument("--rate", type=float, default=4.0)
    parser.add_argument("-o", "--output", required=True)
    args = parser.parse_args(argv)
    try:
        path = export_stats(
            args.checkpoint, args.calib, args.group_size, args.rate, args.output
        )
    except ExportError as exc:
        print(f"radio-export: {exc}", file=sys.stderr)
        return 2
    print(str(path))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
