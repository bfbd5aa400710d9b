"""Token-sequence layouts shared by training, attacking, and evaluation.

Task layouts (the structural marker right after <bos> tells the model which job
it is doing):

    <bos> <rag> (<doc> doc_i)*  <q> question <ans> target <eos>    list QA
    <bos> <one>  <doc> doc      <q> question <ans> target <eos>    single-doc QA
    <bos> <cb>                  <q> question <ans> target <eos>    closed-book QA
    <bos> <ext> (<doc> doc_i)*  <q> question <ans> target <eos>    golden-doc extraction
    <bos> <q> question <doc> example <fab> fabrication <eos>       attacker writing

The loss span is always the target (or fabrication) tokens plus the closing <eos>.
"""
from __future__ import annotations

import numpy as np

from .model import TokenSeq
from .util import AtmError
from .vocab import (ANS_ID, BOS_ID, CB_ID, DOC_ID, EOS_ID, EXT_ID, FAB_ID,
                    ONE_ID, Q_ID, RAG_ID, encode_text)

TASK_RAG = "rag"
TASK_ONE = "one"
TASK_CLOSED = "closed"
TASK_EXTRACT = "extract"

_TASK_MARKERS = {TASK_RAG: RAG_ID, TASK_ONE: ONE_ID, TASK_CLOSED: CB_ID, TASK_EXTRACT: EXT_ID}


def qa_prompt_ids(question: str, doc_texts: list[str], task: str) -> list[int]:
    """Prompt ids up to and including <ans>; generation/scoring continues from there."""
    marker = _TASK_MARKERS.get(task)
    if marker is None:
        raise AtmError(f"unknown task layout {task!r}")
    if task == TASK_CLOSED and doc_texts:
        raise AtmError("closed-book layout takes no documents")
    if task == TASK_ONE and len(doc_texts) != 1:
        raise AtmError("single-doc layout takes exactly one document")
    ids = [BOS_ID, marker]
    for text in doc_texts:
        ids.append(DOC_ID)
        ids.extend(encode_text(text))
    ids.append(Q_ID)
    ids.extend(encode_text(question))
    ids.append(ANS_ID)
    return ids


def _with_target(prompt_ids: list[int], target_text: str) -> TokenSeq:
    target = encode_text(target_text) + [EOS_ID]
    ids = prompt_ids + target
    attn = [1] * len(ids)
    loss = [0] * len(prompt_ids) + [1] * len(target)
    return TokenSeq(np.array(ids), np.array(attn), np.array(loss))


def qa_seq(question: str, doc_texts: list[str], target_text: str, task: str) -> TokenSeq:
    """Full training/scoring sequence: prompt plus loss-masked target span."""
    return _with_target(qa_prompt_ids(question, doc_texts, task), target_text)


def qa_prompt_seq(question: str, doc_texts: list[str], task: str) -> TokenSeq:
    ids = qa_prompt_ids(question, doc_texts, task)
    n = len(ids)
    return TokenSeq(np.array(ids), np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


def attacker_prompt_ids(question: str, example_doc_text: str) -> list[int]:
    ids = [BOS_ID, Q_ID]
    ids.extend(encode_text(question))
    ids.append(DOC_ID)
    ids.extend(encode_text(example_doc_text))
    ids.append(FAB_ID)
    return ids


def attacker_prompt_seq(question: str, example_doc_text: str) -> TokenSeq:
    ids = attacker_prompt_ids(question, example_doc_text)
    n = len(ids)
    return TokenSeq(np.array(ids), np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


def attacker_seq(question: str, example_doc_text: str, fabrication_text: str) -> TokenSeq:
    """Sequence whose loss span is the fabrication; used for pretraining and DPO."""
    return _with_target(attacker_prompt_ids(question, example_doc_text), fabrication_text)
