"""Thin command-line client for the fofseg service.

Every subcommand shuttles files between disk and the HTTP API; all
computation happens behind the service endpoints. By default an
in-process instance of the app serves the requests; pass --server to
talk to a remote one (see `fofseg serve`).
"""

from __future__ import annotations

import argparse
import base64
import re
import sys
from pathlib import Path


class CliError(Exception):
    pass


class ServiceClient:
    """Minimal JSON-over-HTTP client, in-process unless --server is given."""

    def __init__(self, server: str | None = None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=3600.0)
        else:
            from fastapi.testclient import TestClient

            from .service import app

            self._client = TestClient(app)

    def post(self, path: str, payload: dict) -> dict:
        resp = self._client.post(path, json=payload)
        if resp.status_code != 200:
            raise CliError(f"POST {path} failed ({resp.status_code}): {resp.text}")
        return resp.json()

    def delete(self, path: str) -> None:
        self._client.delete(path)


def _b64_of(path: Path) -> str:
    return base64.b64encode(path.read_bytes()).decode("ascii")


def _write_b64(path: Path, data: str) -> None:
    path.write_bytes(base64.b64decode(data))


def _sorted_files(directory: Path, suffix: str) -> list[Path]:
    if not directory.is_dir():
        raise CliError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix == suffix)


_TRAILING_INT = re.compile(r"(\d+)(?!.*\d)")


def _index_of(path: Path) -> int | None:
    m = _TRAILING_INT.search(path.stem)
    return int(m.group(1)) if m else None


def _match_ground_truth(frames: list[Path], gt_dir: Path | None) -> list[Path | None]:
    """Pair ground-truth masks to frames by trailing index, else position."""
    if gt_dir is None:
        return [None] * len(frames)
    gt_files = _sorted_files(gt_dir, ".pgm")
    by_index = {}
    for p in gt_files:
        idx = _index_of(p)
        if idx is not None:
            by_index[idx] = p
    matched: list[Path | None] = []
    for pos, frame in enumerate(frames):
        idx = _index_of(frame)
        if idx is not None and idx in by_index:
            matched.append(by_index[idx])
        elif idx is None and pos < len(gt_files):
            matched.append(gt_files[pos])
        else:
            matched.append(None)
    return matched


def cmd_run(args) -> int:
    client = ServiceClient(args.server)
    frames = _sorted_files(Path(args.frames), ".ppm")
    flows = _sorted_files(Path(args.flows), ".flo")
    if not frames:
        raise CliError(f"no .ppm frames in {args.frames}")
    if len(flows) not in (len(frames), len(frames) - 1):
        raise CliError(f"{len(frames)} frames but {len(flows)} flows")
    if len(flows) == len(frames) - 1:
        flows = flows + [flows[-1]]  # last frame reuses the final flow
    gt = _match_ground_truth(frames, Path(args.gt) if args.gt else None)

    config_text = Path(args.config).read_text() if args.config else ""
    session = client.post(
        "/sessions",
        {
            "mode": args.mode,
            "config_text": config_text,
            "seed": args.seed,
            "max_dim": args.max_dim,
        },
    )
    session_id = session["session_id"]

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    diag_parts = []
    scores = []
    try:
        for i, (frame, flow) in enumerate(zip(frames, flows)):
            payload = {
                "frame_ppm": _b64_of(frame),
                "flow_flo": _b64_of(flow),
                "include_float": bool(args.dump_float),
            }
            if gt[i] is not None:
                payload["gt_pgm"] = _b64_of(gt[i])
            resp = client.post(f"/sessions/{session_id}/frames", payload)
            _write_b64(out_dir / f"mask_{i:04d}.pgm", resp["mask_pgm"])
            _write_b64(out_dir / f"post_{i:04d}.pgm", resp["posterior_pgm"])
            if args.dump_float and resp.get("posterior_f32"):
                _write_b64(out_dir / f"post_{i:04d}.f32", resp["posterior_f32"])
            diag_parts.append(resp["diagnostics"])
            if resp.get("score"):
                scores.append((i, resp["score"]))
            print(
                f"frame {i}: alpha={resp['chosen_alpha']:g} "
                f"components={resp['num_components']}"
                + (f" F={resp['score']['f_measure']:.4f}" if resp.get("score") else "")
            )
    finally:
        client.delete(f"/sessions/{session_id}")

    (out_dir / "diagnostics.txt").write_text("".join(diag_parts))
    if scores:
        lines = ["frame\tprecision\trecall\tf_measure"]
        for i, s in scores:
            lines.append(f"{i}\t{s['precision']:.4f}\t{s['recall']:.4f}\t{s['f_measure']:.4f}")
        mean_f = sum(s["f_measure"] for _, s in scores) / len(scores)
        lines.append("mean_f\t%.4f" % mean_f)
        lines.append("table1\t%s\t%.2f" % (args.mode, 100.0 * mean_f))
        (out_dir / "metrics.txt").write_text("\n".join(lines) + "\n")
        print("mean F-measure: %.4f" % mean_f)
    return 0


def cmd_library_dump(args) -> int:
    client = ServiceClient(args.server)
    resp = client.post(
        "/library/dump",
        {"width": args.width, "height": args.height, "focal_length": args.focal},
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["index\tt_x\tt_y\tt_z"]
    for i, hyp in enumerate(resp["hypotheses"]):
        lines.append("%d\t%.9f\t%.9f\t%.9f" % (i, hyp[0], hyp[1], hyp[2]))
        _write_b64(out_dir / f"fof_{i:02d}.pgm", resp["fof_pgm"][i])
    (out_dir / "hypotheses.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(resp['hypotheses'])} hypotheses to {out_dir}")
    return 0


def cmd_synth(args) -> int:
    client = ServiceClient(args.server)
    resp = client.post("/synth", {"spec_text": Path(args.spec).read_text()})
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for payload in resp["files"]:
        _write_b64(out_dir / payload["name"], payload["data"])
    print(f"wrote {len(resp['files'])} files to {out_dir}")
    return 0


def _eval_one(client, pred_dir: Path, gt_dir: Path):
    preds = _sorted_files(pred_dir, ".pgm")
    masks = [p for p in preds if p.stem.startswith("mask")]
    preds = masks if masks else [p for p in preds if not p.stem.startswith("post")]
    if not preds:
        raise CliError(f"no prediction masks in {pred_dir}")
    gt = _match_ground_truth(preds, gt_dir)
    pairs = []
    for p, g in zip(preds, gt):
        if g is None:
            continue  # unannotated frames are skipped
        pairs.append({"name": p.stem, "pred_pgm": _b64_of(p), "gt_pgm": _b64_of(g)})
    if not pairs:
        raise CliError(f"no prediction/ground-truth pairs between {pred_dir} and {gt_dir}")
    return client.post("/eval", {"pairs": pairs})


def cmd_eval(args) -> int:
    client = ServiceClient(args.server)
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    modes = []
    for sub, title in (("fof", "FOF only"), ("fused", "FOF+color+prior")):
        if (pred_dir / sub).is_dir():
            modes.append((title, pred_dir / sub))
    if not modes:
        modes = [("pred", pred_dir)]

    results = [(title, _eval_one(client, d, gt_dir)) for title, d in modes]
    for title, resp in results:
        print(f"== {title} ==")
        print("name\tprecision\trecall\tf_measure")
        for row in resp["per_frame"]:
            print(f"{row['name']}\t{row['precision']:.4f}\t{row['recall']:.4f}\t{row['f_measure']:.4f}")
    header = "Videoname\t" + "\t".join(title for title, _ in results)
    values = (args.name or pred_dir.name) + "\t" + "\t".join(
        "%.2f" % (100.0 * resp["mean_f"]) for _, resp in results
    )
    print(header)
    print(values)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app

    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fofseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None, help="base URL of a running service; in-process if omitted")

    p = sub.add_parser("run", help="segment a frame/flow sequence")
    p.add_argument("--frames", required=True, help="directory of .ppm frames")
    p.add_argument("--flows", required=True, help="directory of .flo flows (flow i maps frame i to i+1)")
    p.add_argument("--gt", default=None, help="directory of .pgm ground-truth masks (optional)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--mode", choices=("fof", "fused"), default="fused")
    p.add_argument("--seed", type=int, default=None, help="override sampler seed")
    p.add_argument("--max-dim", type=int, default=None, help="downscale inputs so max(w,h) <= N")
    p.add_argument("--dump-float", action="store_true", help="also write raw float32 posteriors")
    add_server(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("library-dump", help="emit every library hypothesis and its FOF image")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--focal", type=float, default=None)
    add_server(p)
    p.set_defaults(func=cmd_library_dump)

    p = sub.add_parser("synth", help="generate a synthetic scene (frames, flows, ground truth)")
    p.add_argument("--spec", required=True, help="scene spec file")
    p.add_argument("--out", required=True)
    add_server(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="mask directory (or parent of fof/ and fused/)")
    p.add_argument("--gt", required=True)
    p.add_argument("--name", default=None, help="video name for the summary row")
    add_server(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
