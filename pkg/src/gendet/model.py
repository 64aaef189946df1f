"""Full detector: featurizer + region-language decoder + heads.

Assembles the pieces into one parameter tree with a forward pass producing
boxes, objectness logits, and per-region text slots; wires the matching and
the combined loss for training; and decodes named detections for inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .dag_head import (
    DagHeadParams,
    TokenDAG,
    build_dags,
    dag_log_tables,
    greedy_decode,
    viterbi_decode,
)
from .evaluation import Detection
from .featurizer import FeaturizerParams, ModelConfig, encode, patch_embed, select_queries
from .numcore import DiffArray, LinearParams
from .objective import LossWeights, MatchAssignment, hungarian_match, matching_cost, total_loss
from .rl_decoder import DecoderLayerParams, init_text_state, run_decoder


@dataclass
class ModelParams:
    featurizer: FeaturizerParams
    slot_embed: DiffArray  # (K, d) positional text embeddings, shared by all queries
    decoder: list
    box_hidden: LinearParams
    box_out: LinearParams
    obj_head: LinearParams
    dag: DagHeadParams

    @staticmethod
    def create(rng, cfg, dtype=np.float32):
        d = cfg.embed_dim
        return ModelParams(
            featurizer=FeaturizerParams.create(rng, cfg, dtype=dtype),
            slot_embed=DiffArray(
                (rng.standard_normal((cfg.text_tokens, d)) * 0.02).astype(dtype),
                requires_grad=True,
            ),
            decoder=[
                DecoderLayerParams.create(rng, d, cfg.ffn_hidden, dtype=dtype)
                for _ in range(cfg.decoder_layers)
            ],
            box_hidden=LinearParams.create(rng, d, d, dtype=dtype),
            box_out=LinearParams.create(rng, d, 4, dtype=dtype),
            obj_head=LinearParams.create(rng, d, 1, dtype=dtype),
            dag=DagHeadParams.create(rng, d, cfg.vocab_size, dtype=dtype),
        )


def _anchor_logits(selected, cfg):
    """Pre-sigmoid anchors per selected patch: box centers start at the
    patch center and sizes at two patch widths."""
    gy, gx = np.divmod(np.asarray(selected), cfg.grid)
    cx = (gx + 0.5) / cfg.grid
    cy = (gy + 0.5) / cfg.grid
    size = np.full_like(cx, min(2.0 * cfg.patch_size / cfg.image_size, 0.9))
    anchors = np.stack([cx, cy, size, size], axis=-1)
    return np.log(anchors / (1.0 - anchors)).astype(np.float32)


class _LazyDags:
    """Per-region TokenDAG views over batched log tables, built on demand
    so only matched regions add slicing nodes to the graph."""

    def __init__(self, log_tr, log_em, b):
        self.log_tr = log_tr
        self.log_em = log_em
        self.b = b

    def __getitem__(self, q):
        log_tr = self.log_tr[self.b, q]
        log_em = self.log_em[self.b, q]
        return TokenDAG(
            transitions=nc.exp(log_tr),
            emissions=nc.exp(log_em),
            log_transitions=log_tr,
            log_emissions=log_em,
        )


@dataclass
class ModelOutput:
    boxes: DiffArray  # (N, 4) sigmoid cxcywh
    objectness_logits: DiffArray  # (N,)
    text: DiffArray  # (N, K, d)
    queries: DiffArray  # (N, d)
    selected: np.ndarray  # encoder token indices chosen as queries


class Detector:
    """The detector with its parameters and training/inference entry points."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = ModelParams.create(rng, cfg, dtype=self.dtype)
        self._named = nc.named_parameters(self.params)

    def parameters(self):
        return self._named

    def num_parameters(self):
        return sum(p.data.size for _, p in self._named)

    def zero_grad(self):
        nc.zero_grads(self._named)

    def forward(self, image):
        """Forward one (H, W, 3) image or a stacked (B, H, W, 3) batch; the
        output tensors carry the same leading batch dim as the input."""
        cfg, p = self.cfg, self.params
        image = np.asarray(image)
        batch = image.shape[0] if image.ndim == 4 else None
        fm = patch_embed(image, p.featurizer, cfg)
        features = encode(fm, p.featurizer, cfg)
        queries, selected = select_queries(features, p.featurizer, cfg)
        text = init_text_state(p.slot_embed, cfg.num_queries, batch=batch)
        query_pos = fm.positions[selected]  # each query anchored to its source patch
        queries, text = run_decoder(
            queries, text, features, p.decoder, cfg.heads, query_pos=query_pos
        )
        # boxes are offsets from each query's patch anchor, squashed at the end
        box_logits = p.box_out(nc.relu(p.box_hidden(queries)))
        boxes = nc.sigmoid(box_logits + _anchor_logits(selected, cfg))
        obj_shape = (cfg.num_queries,) if batch is None else (batch, cfg.num_queries)
        obj = nc.reshape(p.obj_head(queries), obj_shape)
        return ModelOutput(
            boxes=boxes, objectness_logits=obj, text=text, queries=queries, selected=selected
        )

    def loss(self, sample, weights=None):
        """Forward, match, and score one training sample.

        Returns (scalar loss node, per-term floats, assignment). The
        matching is recomputed here and held constant for the gradient.
        """
        weights = weights or LossWeights()
        out = self.forward(sample.image)
        dags = build_dags(out.text, self.params.dag)
        if len(sample.boxes) > 0:
            cost = matching_cost(
                out.boxes.data, out.objectness_logits.data, sample.boxes, weights
            )
            assignment = hungarian_match(cost)
        else:
            assignment = MatchAssignment(pairs=[], unmatched=list(range(self.cfg.num_queries)))
        loss, terms = total_loss(
            out.boxes, out.objectness_logits, dags, sample, assignment, weights
        )
        return loss, terms, assignment

    def loss_batch(self, samples, weights=None):
        """Mean per-sample loss over a batch, built as one graph.

        Returns (scalar loss node, list of per-term dicts, assignments).
        """
        weights = weights or LossWeights()
        images = np.stack([s.image for s in samples])
        out = self.forward(images)
        log_tr, log_em = dag_log_tables(out.text, self.params.dag)
        pieces = []
        all_terms = []
        assignments = []
        for b, sample in enumerate(samples):
            boxes_b = out.boxes[b]
            obj_b = out.objectness_logits[b]
            if len(sample.boxes) > 0:
                cost = matching_cost(boxes_b.data, obj_b.data, sample.boxes, weights)
                assignment = hungarian_match(cost)
            else:
                assignment = MatchAssignment(
                    pairs=[], unmatched=list(range(self.cfg.num_queries))
                )
            dags = _LazyDags(log_tr, log_em, b)
            piece, terms = total_loss(boxes_b, obj_b, dags, sample, assignment, weights)
            pieces.append(piece)
            all_terms.append(terms)
            assignments.append(assignment)
        total = pieces[0]
        for piece in pieces[1:]:
            total = total + piece
        return total * (1.0 / len(samples)), all_terms, assignments

    def detect(self, image, decode="viterbi", top_k=None, score_threshold=0.0):
        """Run inference on one image and return scored, named detections
        ordered by objectness (descending)."""
        if decode not in ("viterbi", "greedy"):
            raise nc.ConfigError(f"unknown decode strategy {decode!r}")
        out = self.forward(image)
        dags = build_dags(out.text, self.params.dag)
        decoder = viterbi_decode if decode == "viterbi" else greedy_decode
        obj = 1.0 / (1.0 + np.exp(-out.objectness_logits.data.astype(np.float64)))
        dets = []
        for n in np.argsort(-obj, kind="stable"):
            score = float(obj[n])
            if score < score_threshold:
                continue
            pred = decoder(dags[n])
            dets.append(
                Detection(
                    box=out.boxes.data[n].astype(np.float64).copy(),
                    objectness=score,
                    token_ids=pred.token_ids,
                    final_score=score,
                )
            )
        if top_k is not None:
            dets = dets[:top_k]
        return dets

    # -- persistence ---------------------------------------------------------

    def state_tensors(self):
        return {f"model.{name}": p.data for name, p in self._named}

    def load_state_tensors(self, tensors):
        for name, p in self._named:
            key = f"model.{name}"
            if key not in tensors:
                raise nc.CheckpointError(f"checkpoint is missing tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise nc.CheckpointError(
                    f"tensor {key} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.astype(self.dtype)

    def save(self, path):
        nc.save_tensors(path, self.state_tensors())

    def load(self, path):
        self.load_state_tensors(nc.load_tensors(path))
