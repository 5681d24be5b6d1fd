import numpy as np
import pytest

from btdnn.corpus import CorpusSpec, Utterance, generate, load_bigram, load_split
from btdnn.criterion import build_denominator_graph, build_numerator_graph

TOY_OFFSETS = ((-1, 0), (0, 1), (-1, 1))


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Small separable corpus shared by trainer/CLI tests."""
    out = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec.toy(num_labels=3, feat_dim=5, separation=3.0,
                          num_utterances=120, mean_duration=3.0, seed=11)
    paths = generate(spec, out)
    return {
        "dir": out,
        "train": load_split(paths["train"]),
        "dev": load_split(paths["dev"]),
        "test": load_split(paths["test"]),
        "bigram": load_bigram(paths["bigram"]),
    }


def make_batch(utterances, bigram):
    return [(i, u, build_numerator_graph(u.alignment, bigram))
            for i, u in enumerate(utterances)]


def uniform_bigram(n_labels):
    table = np.full((n_labels + 1, n_labels + 1), -np.inf)
    table[:, 1:] = np.log(1.0 / n_labels)
    return table


def random_utterance(rng, n_frames, feat_dim, n_labels, name="u"):
    feats = rng.standard_normal((n_frames, feat_dim))
    align = rng.integers(1, n_labels + 1, size=n_frames)
    from btdnn.corpus import run_length_collapse
    return Utterance(name, feats, align, run_length_collapse(align))
