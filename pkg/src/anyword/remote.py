"""Clients and server handlers for backends running in another process."""
from __future__ import annotations

import numpy as np

from anyword.embedopt import EmbeddingSet
from anyword.errors import BackendFailure
from anyword.promptmine import BinaryMask, Frame, MaskPrompt, Point, Polarity
from anyword.protocol import Connection
from anyword.rle import decode_rle, encode_rle


class RemoteDenoiser:
    def __init__(self, conn: Connection):
        self.conn = conn
        info, _ = conn.request({"op": "info"})
        self.attention_resolution = tuple(info.get("attention_resolution", (16, 16)))
        self.num_steps = info.get("num_steps")

    @classmethod
    def connect(cls, uri: str) -> RemoteDenoiser:
        return cls(Connection.open(uri))

    def predict(self, z_t, t, V: EmbeddingSet):
        header = {"op": "predict", "t": int(t), "surfaces": list(V.surfaces)}
        _, out = self.conn.request(header, {"z": z_t, "V": V.vectors})
        try:
            return out["eps"].astype(np.float64), out["attn"].astype(np.float64)
        except KeyError as exc:
            raise BackendFailure(f"reply lacks tensor {exc}") from exc


def denoiser_handler(backend):
    def handle(header, tensors):
        op = header.get("op")
        if op == "info":
            return {
                "attention_resolution": list(backend.attention_resolution),
                "num_steps": getattr(backend, "num_steps", None),
            }, {}
        if op == "predict":
            surfaces = tuple(header["surfaces"])
            V = EmbeddingSet(surfaces, tensors["V"].astype(np.float64), np.zeros(len(surfaces), dtype=bool))
            eps, attn = backend.predict(tensors["z"].astype(np.float64), int(header["t"]), V)
            return {}, {"eps": eps, "attn": attn}
        raise ValueError(f"unknown op {op!r}")

    return handle


class RemoteSegmentor:
    """Client for an out-of-process promptable segmentor.

    The service may return several candidate masks; ``select`` picks the
    top-scored one ("score") or the one with the largest area ("largest").
    """

    def __init__(self, conn: Connection, select: str = "score", max_concurrency: int = 1):
        if select not in ("score", "largest"):
            raise ValueError("select must be 'score' or 'largest'")
        self.conn = conn
        self.select = select
        self.max_concurrency = max_concurrency
        self._info, _ = conn.request({"op": "info"})

    @classmethod
    def connect(cls, uri: str, select: str = "score") -> RemoteSegmentor:
        return cls(Connection.open(uri), select)

    def info(self) -> dict:
        return dict(self._info)

    def segment_with_score(self, image, prompt: MaskPrompt) -> tuple[BinaryMask, float]:
        pts = [[p.x, p.y, 1.0] for p in prompt.positives] + [[p.x, p.y, 0.0] for p in prompt.negatives]
        reply, _ = self.conn.request(
            {"op": "segment"},
            {"image": np.asarray(image, dtype=np.float32), "points": np.asarray(pts, dtype=np.float32)},
        )
        cands = reply.get("masks") or []
        if not cands:
            raise BackendFailure("segmentor returned no masks")
        H, W = np.shape(image)[:2]
        decoded = [(decode_rle(m["counts"], H, W), float(m.get("score", 1.0))) for m in cands]
        if self.select == "largest":
            mask, score = max(decoded, key=lambda ms: int(ms[0].sum()))
        else:
            mask, score = max(decoded, key=lambda ms: ms[1])
        return BinaryMask(mask, Frame.IMAGE), score

    def segment(self, image, prompt: MaskPrompt) -> BinaryMask:
        return self.segment_with_score(image, prompt)[0]


def segmentor_handler(backend):
    """Serve any local segmentor (e.g. the mock) over the protocol."""

    def handle(header, tensors):
        op = header.get("op")
        if op == "info":
            return backend.info(), {}
        if op == "segment":
            image = tensors["image"].astype(np.float64)
            pts = tensors["points"].reshape(-1, 3)
            pos = tuple(_pt(p, Polarity.POSITIVE) for p in pts if p[2] > 0.5)
            neg = tuple(_pt(p, Polarity.NEGATIVE) for p in pts if p[2] <= 0.5)
            prompt = MaskPrompt(0, "", pos, neg, tuple(image.shape[:2]))
            scored = getattr(backend, "segment_with_score", None)
            mask, score = scored(image, prompt) if scored else (backend.segment(image, prompt), 1.0)
            return {"masks": [{"counts": encode_rle(mask.grid), "score": score}]}, {}
        raise ValueError(f"unknown op {op!r}")

    return handle


def _pt(row, polarity):
    return Point(float(row[0]), float(row[1]), polarity)


def llm_transport(uri: str):
    """Prompt-to-reply callable for a chat model served over the protocol."""
    conn = Connection.open(uri)

    def ask(prompt: str) -> str:
        reply, _ = conn.request({"op": "chat", "prompt": prompt})
        return str(reply.get("text", ""))

    return ask
