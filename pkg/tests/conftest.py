import numpy as np
import pytest

from gclrec.dataset import InteractionSet

# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(number, description, status):
    ACCEPTANCE_LINES.append(f"criterion {number:2d}: {status:4s} - {description}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def make_interactions(num_users, num_items, pairs):
    """Build an InteractionSet directly from index pairs."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return InteractionSet(
        num_users=num_users,
        num_items=num_items,
        pairs=arr,
        user_map={str(u): u for u in range(num_users)},
        item_map={str(i): i for i in range(num_items)},
    )


def random_interactions(num_users, num_items, density, seed, min_per_user=1):
    """Random binary interaction structure with at least min_per_user items
    per user, so every user is rankable."""
    rng = np.random.default_rng(seed)
    mask = rng.random((num_users, num_items)) < density
    for u in range(num_users):
        while mask[u].sum() < min_per_user:
            mask[u, rng.integers(num_items)] = True
    users, items = np.nonzero(mask)
    return make_interactions(num_users, num_items, np.column_stack([users, items]))


@pytest.fixture
def toy_interactions():
    # 4 users x 5 items, hand-picked so the complement matrix at gamma=2
    # keeps some co-occurrence pairs and drops others.
    pairs = [
        (0, 0), (0, 1), (0, 2),
        (1, 0), (1, 1), (1, 3),
        (2, 0), (2, 1), (2, 4),
        (3, 2), (3, 3),
    ]
    return make_interactions(4, 5, pairs)


@pytest.fixture
def small_random():
    return random_interactions(30, 40, density=0.12, seed=7, min_per_user=2)
