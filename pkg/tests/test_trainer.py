import math

import numpy as np
import pytest
import torch

from slotflow import synthdata
from slotflow.model import build_model
from slotflow.trainer import (
    CheckpointError,
    SyntheticClipSource,
    TrainConfig,
    Trainer,
    lambdas_at,
    lr_at,
)

from helpers import micro_model_config


def micro_train_config(**kw) -> TrainConfig:
    defaults = dict(batch_size=1, base_lr=1e-3, total_iters=100, warmup_iters=5,
                    checkpoint_every=0, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def micro_corpus(n=3, clip_len=4, seed=0):
    canvas = synthdata.CanvasConfig(height=32, width=64)
    return synthdata.random_corpus(n, canvas, num_frames=clip_len, seed=seed)


@pytest.fixture
def trainer(tmp_path):
    model = build_model(micro_model_config(), seed=0)
    source = SyntheticClipSource(micro_corpus())
    return Trainer(model, source, micro_train_config(), out_dir=tmp_path)


class TestSchedules:
    CFG = TrainConfig()  # published defaults: warmup 1000, decay/boost every 100k

    def test_warmup_midpoint(self):
        assert lr_at(500, self.CFG) == pytest.approx(2e-5)

    def test_warmup_end(self):
        assert lr_at(1000, self.CFG) == 4e-5

    def test_decay_boundaries(self):
        assert lr_at(100_999, self.CFG) == 4e-5
        assert lr_at(101_000, self.CFG) == 2e-5

    def test_start_at_zero(self):
        assert lr_at(0, self.CFG) == 0.0

    def test_lambda_schedule(self):
        w0 = lambdas_at(0, self.CFG)
        assert (w0.recon, w0.consistency, w0.entropy) == (100.0, 0.01, 0.01)
        w1 = lambdas_at(100_000, self.CFG)
        assert w1.consistency == pytest.approx(0.05)
        assert w1.entropy == pytest.approx(0.05)
        w2 = lambdas_at(250_000, self.CFG)
        assert w2.consistency == pytest.approx(0.25)
        assert w2.recon == 100.0

    def test_pure_functions_of_step(self):
        for step in (0, 999, 1000, 99_999, 100_000, 250_000):
            assert lr_at(step, self.CFG) == lr_at(step, self.CFG)
            assert lambdas_at(step, self.CFG) == lambdas_at(step, self.CFG)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(warmup_iters=10, total_iters=10).validate()
        with pytest.raises(ValueError):
            lr_at(-1, self.CFG)


class TestTrainStep:
    def test_smoke_step_changes_parameters(self, trainer):
        before = {k: v.clone() for k, v in trainer.model.named_parameters()}
        batch = trainer.sample_batch(1)  # step >= 1 so the lr is nonzero
        report = trainer.train_step(batch, 1)
        assert math.isfinite(report.total)
        changed = any(not torch.equal(before[k], v) for k, v in trainer.model.named_parameters())
        assert changed

    def test_three_pairs_per_reference(self, trainer):
        batch = trainer.sample_batch(0)
        report = trainer.train_step(batch, 0)
        T = batch[0].frames.shape[0]
        assert len(report.pairs) == 3 * T * len(batch)
        statics = [p for p in report.pairs if p["static"]]
        assert len(statics) == T * len(batch)
        for p in statics:
            assert p["reference"] == p["target"]
            assert "recon" not in p

    def test_deterministic_replay(self, tmp_path):
        reports = []
        for run in range(2):
            model = build_model(micro_model_config(), seed=0)
            source = SyntheticClipSource(micro_corpus())
            t = Trainer(model, source, micro_train_config(), out_dir=tmp_path / str(run))
            reports.append([r.total for r in t.run(5)])
        assert reports[0] == reports[1]

    def test_nonfinite_loss_aborts_with_term_name(self, trainer):
        with torch.no_grad():
            trainer.model.router.slot_init.fill_(float("nan"))
        batch = trainer.sample_batch(0)
        with pytest.raises(RuntimeError, match="non-finite (recon|cons|entro)"):
            trainer.train_step(batch, 0)

    def test_log_rows_written(self, trainer, tmp_path):
        trainer.run(3)
        log = tmp_path / "train_log.csv"
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,recon,cons,entro,total,lr,lambda_c,lambda_e"
        assert len(lines) == 4


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, trainer, tmp_path):
        trainer.run(2)
        p1, p2 = tmp_path / "a.pt", tmp_path / "b.pt"
        trainer.save_checkpoint(p1)
        trainer.load_checkpoint(p1)
        trainer.save_checkpoint(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_parameter_round_trip(self, trainer, tmp_path):
        trainer.run(2)
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path)
        before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
        trainer.run(1)  # move away
        trainer.load_checkpoint(path)
        for k, v in trainer.model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_resume_reproduces_uninterrupted_run(self, tmp_path):
        def fresh(out):
            model = build_model(micro_model_config(), seed=0)
            source = SyntheticClipSource(micro_corpus())
            return Trainer(model, source, micro_train_config(), out_dir=out)

        straight = fresh(tmp_path / "straight")
        full = [r.total for r in straight.run(8)]

        resumed = fresh(tmp_path / "part1")
        resumed.run(5)
        ck = tmp_path / "mid.pt"
        resumed.save_checkpoint(ck)

        fresh_trainer = fresh(tmp_path / "part2")
        fresh_trainer.load_checkpoint(ck)
        assert fresh_trainer.step == 5
        tail = [r.total for r in fresh_trainer.run(3)]
        assert tail == full[5:]

    def test_architecture_mismatch_names_parameter(self, trainer, tmp_path):
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path)
        other_cfg = micro_model_config()
        other_cfg.encoder.stage_channels = [8, 24]
        other_cfg.encoder.stage_heads = [2, 4]
        other = build_model(other_cfg, seed=0)
        t2 = Trainer(other, trainer.source, micro_train_config(), out_dir=tmp_path / "o")
        with pytest.raises(CheckpointError, match="parameter '"):
            t2.load_checkpoint(path)

    def test_version_mismatch(self, trainer, tmp_path):
        path = tmp_path / "ck.pt"
        trainer.save_checkpoint(path)
        payload = torch.load(path, weights_only=False)
        payload["version"] = 999
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            trainer.load_checkpoint(path)


class TestSources:
    def test_synthetic_source_targets_always_available(self):
        source = SyntheticClipSource(micro_corpus())
        clip = source.sample(np.random.default_rng(0))
        T = clip.frames.shape[0]
        for i in range(T):
            assert clip.motion_targets_available(i) == [j for j in range(T) if j != i]
            target = clip.flow_target(i, (i + 1) % T)
            assert target.shape == clip.frames.shape[1:3] + (3,)

    def test_fixed_scale_shared_across_clips(self):
        source = SyntheticClipSource(micro_corpus())
        mags = [c.max_flow_magnitude() for c in source.clips]
        assert source.max_mag == pytest.approx(max(mags))
