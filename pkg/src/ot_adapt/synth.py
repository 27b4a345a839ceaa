"""Seeded "speakers under channel shift" datasets.

Source utterances are speaker means plus within-speaker scatter, with energy
tilted towards low coordinates the way speech spectra fall off with frequency.
Target utterances are the same utterances passed through a fixed channel:
the top coordinates are zeroed (band limiting), the rest rotated by a fixed
orthogonal matrix, and white noise scaled by ``channel_noise_level`` is added.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .evaluate import TrialSet

SPLITS = ("source_train", "source_test", "target_adapt", "target_test")


@dataclass(frozen=True)
class DomainSpec:
    num_speakers: int = 64
    samples_per_speaker: int = 50
    test_samples_per_speaker: int = 20
    input_dim: int = 40
    target_speaker_subset: int | None = None
    channel_noise_level: float = 0.5
    bandwidth_fraction: float = 0.5
    channel_rotation: float = 0.5
    within_speaker_std: float = 0.5
    spectral_tilt: float = 1.0
    envelope_level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_speakers", "samples_per_speaker", "test_samples_per_speaker", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.target_speaker_subset is not None and not 1 <= self.target_speaker_subset <= self.num_speakers:
            raise ValueError("target_speaker_subset must lie in [1, num_speakers]")
        if self.channel_noise_level < 0:
            raise ValueError("channel_noise_level must be nonnegative")
        if not 0 < self.bandwidth_fraction <= 1:
            raise ValueError("bandwidth_fraction must lie in (0, 1]")
        if self.within_speaker_std < 0 or self.channel_rotation < 0:
            raise ValueError("within_speaker_std and channel_rotation must be nonnegative")

    @property
    def subset_size(self) -> int:
        return self.num_speakers if self.target_speaker_subset is None else self.target_speaker_subset


@dataclass
class Dataset:
    X: np.ndarray
    speakers: np.ndarray
    domain: str
    split: str

    def __len__(self):
        return len(self.X)


@dataclass
class DomainData:
    source_train: Dataset
    source_test: Dataset
    target_adapt: Dataset
    target_test: Dataset
    target_speakers: np.ndarray
    channel: np.ndarray

    def splits(self):
        return {name: getattr(self, name) for name in SPLITS}


def _streams(seed):
    names = ("means", "train", "test", "channel", "subset", "noise_adapt", "noise_test")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(ss) for name, ss in zip(names, children)}


def channel_matrix(spec: DomainSpec, rng) -> np.ndarray:
    """Orthogonal matrix exp(r * A) for a random skew-symmetric A; identity at r = 0."""
    G = rng.standard_normal((spec.input_dim, spec.input_dim))
    A = (G - G.T) / np.sqrt(2.0 * spec.input_dim)
    return expm(spec.channel_rotation * A)


def _sample(means, per_speaker, std, tilt, rng):
    K, D = means.shape
    speakers = np.repeat(np.arange(K), per_speaker)
    X = means[speakers] + std * tilt * rng.standard_normal((len(speakers), D))
    return X, speakers


def apply_channel(X, spec: DomainSpec, M, noise):
    kept = int(round(spec.bandwidth_fraction * spec.input_dim))
    Y = X.copy()
    Y[:, kept:] = 0.0
    return Y @ M.T + spec.channel_noise_level * noise


def generate(spec: DomainSpec) -> DomainData:
    r = _streams(spec.seed)
    K, D = spec.num_speakers, spec.input_dim
    tilt = np.exp(-spec.spectral_tilt * np.arange(D) / D)
    tilt /= np.sqrt(np.mean(tilt ** 2))
    # shared spectral envelope plus per-speaker deviations around it
    means = spec.envelope_level * tilt + tilt * r["means"].standard_normal((K, D))
    M = channel_matrix(spec, r["channel"])

    Xtr, ytr = _sample(means, spec.samples_per_speaker, spec.within_speaker_std, tilt, r["train"])
    Xte, yte = _sample(means, spec.test_samples_per_speaker, spec.within_speaker_std, tilt, r["test"])
    noise_adapt = r["noise_adapt"].standard_normal(Xtr.shape)
    noise_test = r["noise_test"].standard_normal(Xte.shape)

    subset = np.sort(r["subset"].permutation(K)[:spec.subset_size])
    keep = np.isin(ytr, subset)
    Xad = apply_channel(Xtr[keep], spec, M, noise_adapt[keep])
    Xtt = apply_channel(Xte, spec, M, noise_test)
    return DomainData(
        source_train=Dataset(Xtr, ytr, "source", "train"),
        source_test=Dataset(Xte, yte, "source", "test"),
        target_adapt=Dataset(Xad, ytr[keep], "target", "adapt"),
        target_test=Dataset(Xtt, yte, "target", "test"),
        target_speakers=subset,
        channel=M,
    )


def make_trials(speakers, pairs_per_class: int, seed: int = 0) -> TrialSet:
    """Balanced same/different trial list over distinct unordered pairs."""
    speakers = np.asarray(speakers)
    if len(np.unique(speakers)) < 2:
        raise ValueError("trials need at least two speakers")
    a, b = np.triu_indices(len(speakers), k=1)
    same = speakers[a] == speakers[b]
    same_idx, diff_idx = np.flatnonzero(same), np.flatnonzero(~same)
    k = min(pairs_per_class, len(same_idx), len(diff_idx))
    if k == 0:
        raise ValueError("not enough samples to form both same- and different-speaker trials")
    rng = np.random.default_rng(seed)
    chosen = np.sort(np.concatenate([rng.choice(same_idx, k, replace=False),
                                     rng.choice(diff_idx, k, replace=False)]))
    return TrialSet(a[chosen], b[chosen], same[chosen])


def write_dataset_csv(datasets, path) -> None:
    """One CSV of rows (speaker_id, domain, split, x0..x{D-1}) at 17 significant digits."""
    datasets = list(datasets)
    D = datasets[0].X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["speaker_id", "domain", "split", *(f"x{j}" for j in range(D))])
        for ds in datasets:
            for spk, row in zip(ds.speakers.tolist(), ds.X):
                w.writerow([spk, ds.domain, ds.split, *(format(v, ".17g") for v in row.tolist())])


def read_dataset_csv(path) -> dict[tuple[str, str], Dataset]:
    """Read back a dataset CSV, grouped by (domain, split)."""
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["speaker_id", "domain", "split"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for row in reader:
            xs, ys = groups.setdefault((row[1], row[2]), ([], []))
            ys.append(int(row[0]))
            xs.append([float(v) for v in row[3:]])
    return {key: Dataset(np.array(xs, dtype=np.float64), np.array(ys), *key)
            for key, (xs, ys) in groups.items()}


def spec_dict(spec: DomainSpec) -> dict:
    return asdict(spec)


def write_generated(data: DomainData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"source": out / "source.csv", "target": out / "target.csv"}
    write_dataset_csv([data.source_train, data.source_test], paths["source"])
    write_dataset_csv([data.target_adapt, data.target_test], paths["target"])
    return paths
