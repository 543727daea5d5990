"""The navigation network.

Language goes through a 2-layer bidirectional LSTM (per-direction states
concatenated). The trajectory encoder is a 2-layer LSTM whose step input is
an attention-pooled panorama, queried by the previous trajectory state. The
action predictor scores each navigable direction with a bilinear product
between the projected [state; text context; visual context] and the
projected direction feature. A two-layer perceptron head classifies the
house from the trajectory state, optionally behind gradient reversal.

One parameter store serves both tasks; the separate-language-encoder
ablation only duplicates the language LSTM stacks (the word embedding table
stays joint, as does everything downstream).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ParameterStore, Tape, Tensor, constant
from .world import DirectionOption


class EmptySequence(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_houses: int
    view_dim: int
    word_dim: int = 300
    lang_hidden: int = 256  # per direction
    lang_layers: int = 2
    traj_hidden: int = 512
    traj_layers: int = 2
    attn_dim: int = 128
    classifier_hidden: int = 128
    share_language_encoder: bool = True

    @property
    def lang_dim(self) -> int:
        return 2 * self.lang_hidden


@dataclass
class LanguageEncoding:
    """Per-token states (n, lang_dim) plus their projection into attention space."""

    states: Tensor
    proj_keys: Tensor


@dataclass
class TrajectoryState:
    layers: list[tuple[Tensor, Tensor]]
    step: int = 0

    @property
    def h_top(self) -> Tensor:
        return self.layers[-1][0]


@dataclass
class ActionDistribution:
    probs: Tensor
    log_probs: Tensor
    options: Sequence[DirectionOption]


class NavModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParameterStore()
        self._build(rng)

    # -- parameters -----------------------------------------------------------

    def _lang_prefix(self, task: str) -> str:
        return "lang" if self.cfg.share_language_encoder else f"lang_{task}"

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        p = self.params
        p.uniform("embed", rng, (cfg.vocab_size, cfg.word_dim))
        prefixes = ["lang"] if cfg.share_language_encoder else ["lang_vln", "lang_ndh"]
        for prefix in prefixes:
            for li in range(cfg.lang_layers):
                in_dim = cfg.word_dim if li == 0 else cfg.lang_dim
                for direction in ("fwd", "bwd"):
                    base = f"{prefix}.l{li}.{direction}"
                    p.uniform(f"{base}.w_ih", rng, (in_dim, 4 * cfg.lang_hidden))
                    p.uniform(f"{base}.w_hh", rng, (cfg.lang_hidden, 4 * cfg.lang_hidden))
                    p.uniform(f"{base}.b", rng, (4 * cfg.lang_hidden,))
        for li in range(cfg.traj_layers):
            in_dim = cfg.view_dim if li == 0 else cfg.traj_hidden
            base = f"traj.l{li}"
            p.uniform(f"{base}.w_ih", rng, (in_dim, 4 * cfg.traj_hidden))
            p.uniform(f"{base}.w_hh", rng, (cfg.traj_hidden, 4 * cfg.traj_hidden))
            p.uniform(f"{base}.b", rng, (4 * cfg.traj_hidden,))
        p.uniform("attn.pan.wq", rng, (cfg.traj_hidden, cfg.attn_dim))
        p.uniform("attn.pan.wk", rng, (cfg.view_dim, cfg.attn_dim))
        p.uniform("attn.text.wq", rng, (cfg.traj_hidden, cfg.attn_dim))
        p.uniform("attn.text.wk", rng, (cfg.lang_dim, cfg.attn_dim))
        p.uniform("attn.vis.wq", rng, (cfg.lang_dim, cfg.attn_dim))
        p.uniform("attn.vis.wk", rng, (cfg.view_dim, cfg.attn_dim))
        ctx_dim = cfg.traj_hidden + cfg.lang_dim + cfg.view_dim
        p.uniform("act.w_ctx", rng, (ctx_dim, cfg.attn_dim))
        p.uniform("act.w_dir", rng, (cfg.view_dim, cfg.attn_dim))
        p.uniform("act.stop", rng, (cfg.view_dim,))
        p.uniform("cls.w1", rng, (cfg.traj_hidden, cfg.classifier_hidden))
        p.uniform("cls.b1", rng, (cfg.classifier_hidden,))
        p.uniform("cls.w2", rng, (cfg.classifier_hidden, cfg.num_houses))
        p.uniform("cls.b2", rng, (cfg.num_houses,))

    def zero_parameters(self) -> None:
        for _, t in self.params.items():
            t.data = np.zeros_like(t.data)

    # -- encoders ---------------------------------------------------------------

    def _direction_states(self, tape: Tape, x: Tensor, base: str, reverse: bool) -> Tensor:
        return tape.lstm_seq(x, self.params[f"{base}.w_ih"],
                             self.params[f"{base}.w_hh"],
                             self.params[f"{base}.b"], reverse=reverse)

    def encode_language(self, tape: Tape, token_ids: Sequence[int],
                        task: str = "vln") -> LanguageEncoding:
        if len(token_ids) == 0:
            raise EmptySequence("cannot encode an empty token sequence")
        prefix = self._lang_prefix(task)
        x = tape.embedding(self.params["embed"], token_ids)
        for li in range(self.cfg.lang_layers):
            fwd = self._direction_states(tape, x, f"{prefix}.l{li}.fwd", reverse=False)
            bwd = self._direction_states(tape, x, f"{prefix}.l{li}.bwd", reverse=True)
            x = tape.hconcat(fwd, bwd)
        proj_keys = tape.matmul(x, self.params["attn.text.wk"])
        return LanguageEncoding(states=x, proj_keys=proj_keys)

    def initial_state(self, tape: Tape) -> TrajectoryState:
        zeros = lambda: constant(np.zeros(self.cfg.traj_hidden))
        return TrajectoryState(layers=[(zeros(), zeros())
                                       for _ in range(self.cfg.traj_layers)], step=0)

    def encode_panorama_step(self, tape: Tape, state: TrajectoryState,
                             panorama: np.ndarray | Tensor) -> tuple[Tensor, Tensor, TrajectoryState]:
        """Attention-pool the panorama and advance the trajectory LSTM.

        Returns (pooled view v_t, panorama tensor for reuse, new state).
        """
        pan = panorama if isinstance(panorama, Tensor) else constant(panorama)
        q = tape.matmul(state.h_top, self.params["attn.pan.wq"])
        keys = tape.matmul(pan, self.params["attn.pan.wk"])
        v_t, _ = tape.dot_attention(q, keys, pan)
        x = v_t
        new_layers = []
        for li, (h, c) in enumerate(state.layers):
            base = f"traj.l{li}"
            h, c = tape.lstm_cell(x, h, c, self.params[f"{base}.w_ih"],
                                  self.params[f"{base}.w_hh"], self.params[f"{base}.b"])
            new_layers.append((h, c))
            x = h
        return v_t, pan, TrajectoryState(layers=new_layers, step=state.step + 1)

    # -- heads ----------------------------------------------------------------------

    def direction_tensor(self, option: DirectionOption) -> Tensor:
        if option.target is None:
            return self.params["act.stop"]
        return constant(option.feature)

    def predict_action(self, tape: Tape, state: TrajectoryState, lang: LanguageEncoding,
                       pan: Tensor, options: Sequence[DirectionOption]) -> ActionDistribution:
        if len(options) == 0:
            raise ValueError("no directions to score")
        q_text = tape.matmul(state.h_top, self.params["attn.text.wq"])
        c_text, _ = tape.dot_attention(q_text, lang.proj_keys, lang.states)
        q_vis = tape.matmul(c_text, self.params["attn.vis.wq"])
        vis_keys = tape.matmul(pan, self.params["attn.vis.wk"])
        c_vis, _ = tape.dot_attention(q_vis, vis_keys, pan)
        ctx = tape.concat([state.h_top, c_text, c_vis])
        ctx_p = tape.matmul(ctx, self.params["act.w_ctx"])
        dirs = tape.stack([self.direction_tensor(o) for o in options])
        dir_p = tape.matmul(dirs, self.params["act.w_dir"])
        logits = tape.matmul(dir_p, ctx_p)
        return ActionDistribution(probs=tape.softmax(logits),
                                  log_probs=tape.log_softmax(logits),
                                  options=options)

    def classify_environment(self, tape: Tape, state: TrajectoryState,
                             reverse: bool = True, lam: float = 1.3) -> tuple[Tensor, Tensor]:
        """House-label distribution from the trajectory latent z_t = h_t.

        With `reverse`, gradients into the trajectory encoder are scaled by
        -lam while the head itself still learns to classify.
        """
        z = state.h_top
        x = tape.grad_reverse(z, lam) if reverse else z
        h1 = tape.relu(tape.add(tape.matmul(x, self.params["cls.w1"]),
                                self.params["cls.b1"]))
        logits = tape.add(tape.matmul(h1, self.params["cls.w2"]), self.params["cls.b2"])
        return tape.softmax(logits), tape.log_softmax(logits)
