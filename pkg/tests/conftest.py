import numpy as np

from dasid import alignment as al
from dasid import numerics as nx
from dasid.dataset import Dataset
from dasid.trainer import DasModel, TrainConfig

MICRO = TrainConfig(B=4, L=2, N=8, d=4, L_neg=2, hidden=6, emb_dim=4, tower_width=8, K_bank=4, epochs=1,
                    warmup_samples=16, kmeans_iters=3)


def micro_dataset(n_users=6, n_ads=5, seed=0):
    """Four clicked rows where users 0 and 2 share ad 0 and user 0 also clicked ad 2."""
    rng = nx.make_rng(seed)
    user_idx = np.array([0, 1, 2, 0, 3, 4, 5, 1])
    ad_idx = np.array([0, 1, 0, 2, 3, 4, 1, 2])
    click = np.array([1, 1, 1, 1, 0, 1, 0, 1], dtype=np.int8)
    return Dataset([f"u{k}" for k in range(n_users)], [f"a{k}" for k in range(n_ads)],
                   rng.normal(size=(n_users, 5)), rng.normal(size=(n_ads, 4)),
                   rng.normal(size=(n_users, 3)), rng.normal(size=(n_ads, 2)),
                   user_idx, ad_idx, click, np.arange(8), train_frac=1.0)


def micro_setup(seed=0):
    """Model, primed memory bank, dataset and the four batch rows for gradient checks."""
    data = micro_dataset(seed=seed)
    with nx.precision("float64"):
        model = DasModel.for_dataset(MICRO, data, nx.make_rng(seed + 1))
    rng = nx.make_rng(seed + 2)
    bank = al.MemoryBank(MICRO.K_bank)
    # earlier co-clicks so every user and ad in the batch has a co-occurrence partner
    bank.update([4, 5, 3, 1, 4, 0], [0, 1, 2, 3, 3, 4], rng.normal(size=(6, 4)), rng.normal(size=(6, 4)))
    return model, bank, data, np.arange(4)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
