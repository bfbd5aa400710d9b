"""Train/test split with held-out facts.

Questions about a held-out fact never appear in training, so at evaluation time the
generator cannot answer them from memorized knowledge and must actually read the
retrieved list. That is where fabricated documents can genuinely mislead it.
"""
from __future__ import annotations

from .corpus import QaInstance
from .util import SizingError, subrng


def split_instances(instances: list[QaInstance], n_train: int, n_test: int,
                    held_out_facts: int, seed: int
                    ) -> tuple[list[QaInstance], list[QaInstance]]:
    """Deterministic split; all questions of a held-out fact land in the test set.

    Facts are identified by their golden document. Held-out facts are drawn first;
    the remaining test questions and all training questions come from the rest.
    """
    if n_train + n_test > len(instances):
        raise SizingError(
            f"split needs {n_train + n_test} instances, have {len(instances)}")
    rng = subrng(seed, "fact-split")
    if held_out_facts == 0:
        order = rng.permutation(len(instances))
        picked = [instances[int(i)] for i in order[:n_train + n_test]]
        return picked[:n_train], picked[n_train:]
    by_fact: dict[str, list[QaInstance]] = {}
    for inst in instances:
        by_fact.setdefault(inst.golden_doc_id, []).append(inst)
    fact_ids = sorted(by_fact)
    if held_out_facts >= len(fact_ids):
        raise SizingError(f"cannot hold out {held_out_facts} of {len(fact_ids)} facts")
    order = rng.permutation(len(fact_ids))
    held = {fact_ids[int(i)] for i in order[:held_out_facts]}

    test = [inst for fid in sorted(held) for inst in by_fact[fid]]
    if len(test) > n_test:
        raise SizingError(
            f"{held_out_facts} held-out facts produce {len(test)} questions, "
            f"more than n_test={n_test}")
    rest = [inst for inst in instances if inst.golden_doc_id not in held]
    fill = rng.permutation(len(rest))
    need = n_test - len(test)
    test = test + [rest[int(i)] for i in fill[:need]]
    remaining = [rest[int(i)] for i in fill[need:]]
    if len(remaining) < n_train:
        raise SizingError(f"only {len(remaining)} instances left for n_train={n_train}")
    train = remaining[:n_train]
    return train, test
