"""Feeding tiles to adapters: pixel reads, prompt bundles, bounded prefetch."""

from __future__ import annotations

import queue
import threading
from pathlib import Path

import numpy as np

from mitovl.ingest import SlideInfo
from mitovl.prompts import NO_METADATA_QUESTION, PromptMode, PromptTemplates, build_prompt, candidate_bundles
from mitovl.tilegeom import SlideCache, TileSpec, read_tile_pixels


class TileSource:
    """Reads tile pixels from materialised crops when present, else from slides."""

    def __init__(self, slides: dict[str, SlideInfo], cache: SlideCache | None = None, crops_dir=None):
        self.slides = slides
        self.cache = cache or SlideCache()
        self.crops_dir = Path(crops_dir) if crops_dir else None

    def read(self, tile: TileSpec) -> np.ndarray:
        if self.crops_dir is not None:
            path = self.crops_dir / f"{tile.key}.png"
            if path.exists():
                from PIL import Image

                with Image.open(path) as im:
                    return np.asarray(im.convert("RGB"))
        return read_tile_pixels(tile, self.slides[tile.slide_id], self.cache)

    def pixels(self, tiles) -> np.ndarray:
        return np.stack([self.read(t) for t in tiles])


def templates_for(templates: PromptTemplates, no_metadata: bool) -> PromptTemplates:
    if no_metadata:
        return PromptTemplates(vqa_question=NO_METADATA_QUESTION, complete_caption=templates.complete_caption)
    return templates


def bundles_for(tiles, slides, mode, templates=PromptTemplates(), no_metadata=False):
    if mode is None:
        return [None] * len(tiles)
    t = templates_for(templates, no_metadata)
    return [build_prompt(mode, x.label, slides[x.slide_id].metadata, t) for x in tiles]


def pairs_for(tiles, slides, mode, templates=PromptTemplates(), no_metadata=False):
    if mode is None:
        return [None] * len(tiles)
    t = templates_for(templates, no_metadata)
    return [candidate_bundles(PromptMode(mode), slides[x.slide_id].metadata, t) for x in tiles]


def batch_order(n: int, batch_size: int, seed: int | None = None, epoch: int = 0) -> list[np.ndarray]:
    """Index batches; shuffled deterministically from ``(seed, epoch)`` when ``seed`` is given."""
    idx = np.arange(n)
    if seed is not None:
        idx = np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)
    return [idx[i : i + batch_size] for i in range(0, n, batch_size)]


def prefetch(batches, load, depth: int = 2):
    """Yield ``(indices, load(indices))`` in order while a worker thread loads ahead.

    The queue is bounded by ``depth`` so at most ``depth`` loaded batches wait in memory.
    """
    if depth <= 0:
        for b in batches:
            yield b, load(b)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()
    sentinel = object()

    def work():
        try:
            for b in batches:
                if stop.is_set():
                    return
                q.put((b, load(b)))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
            return
        q.put(sentinel)

    th = threading.Thread(target=work, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is sentinel:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(timeout=0.05)
