"""Shared fixtures and oracle helpers."""

from __future__ import annotations

import numpy as np
import pytest

from momentsearch.core import VideoMeta
from momentsearch.dataio import Corpus
from momentsearch.model import ModelDims, ModelParams


def identity_visual_params(visual_in: int, word_in: int = 4, hidden_lstm: int = 5) -> ModelParams:
    """A visual head that reproduces the raw clip feature exactly.

    relu(x) - relu(-x) == x, so W1 stacks [+I; -I] over the clip-feature
    slots (context slots zeroed) and W2 recombines with [I, -I].
    """
    v = visual_in
    dims = ModelDims(v, word_in, hidden_mlp=2 * v, embed=v, hidden_lstm=hidden_lstm)
    w1 = np.zeros((2 * v, dims.mlp_in))
    w1[:v, :v] = np.eye(v)
    w1[v:, :v] = -np.eye(v)
    w2 = np.concatenate([np.eye(v), -np.eye(v)], axis=1)
    h = hidden_lstm
    return ModelParams(
        dims=dims,
        mlp_w1=w1,
        mlp_b1=np.zeros(2 * v),
        mlp_w2=w2,
        mlp_b2=np.zeros(v),
        lstm_wx=np.zeros((4 * h, word_in)),
        lstm_wh=np.zeros((4 * h, h)),
        lstm_b=np.zeros(4 * h),
        proj_w=np.zeros((v, h)),
        proj_b=np.zeros(v),
    )


def make_corpus(
    rng: np.random.Generator,
    num_videos: int = 4,
    num_clips: int = 8,
    visual_dim: int = 6,
    clip_length: float = 2.0,
) -> Corpus:
    videos = []
    features = {}
    for i in range(num_videos):
        vid = f"v{i:03d}"
        videos.append(VideoMeta(vid, num_clips * clip_length, clip_length, num_clips))
        features[vid] = rng.standard_normal((num_clips, visual_dim))
    return Corpus(videos, features)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
