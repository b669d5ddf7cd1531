import numpy as np
import pytest

from ticstream.datagen import StreamConfig, generate_stream
from ticstream.methods import (
    METHOD_IDS,
    ConfigError,
    PatchState,
    ProtocolError,
    StepContext,
    apply_patch,
    resolve_method,
    run_step,
    tune_patch_alpha,
)
from ticstream.model import ModelDims, init_params
from ticstream.numerics import Rng, ShapeError
from ticstream.schedule import BudgetLedger, ScheduleConfig, macs_per_iteration

DIMS = ModelDims(image_dim=6, text_dim=5, hidden_dim=8, embed_dim=4)
PER_STEP_ITERS = 12
BATCH = 8


@pytest.fixture(scope="module")
def stream():
    cfg = StreamConfig(
        num_steps=4, per_step_train_size=40, per_step_eval_size=10,
        image_dim=6, text_dim=5, latent_dim=4,
        class_birth_schedule=((1, 3),), drift_angle=0.3, noise_sigma=0.1,
        static_class_count=1, seed=17,
    )
    return generate_stream(cfg)


def make_ctx(seed=0, kind="warmup_cosine", per_step_iters=PER_STEP_ITERS, budget_mult=1.0):
    sched = ScheduleConfig(kind=kind, max_lr=1e-3, total_iters=per_step_iters,
                           warmup_iters=2, decay_fraction=0.5)
    probe = init_params(DIMS, Rng(seed))
    budget = per_step_iters * macs_per_iteration(probe, BATCH) * budget_mult
    return StepContext(
        seed=seed, dims=DIMS, batch_size=BATCH, per_step_iters=per_step_iters,
        schedule=sched, per_step_size=40, lwf_lambda=1.0,
        ledger=BudgetLedger(budget),
    )


def run_through(method_id, stream, upto, ctx=None):
    spec = resolve_method(method_id)
    ctx = ctx or make_ctx()
    prev, patch = None, None
    out = []
    for t in range(1, upto + 1):
        deploy, carry, patch, rec = run_step(spec, t, stream, prev, patch, ctx)
        prev = carry
        out.append((deploy, carry, patch, rec))
    return out, ctx


def flat_equal(a, b):
    fa, fb = a.to_flat(), b.to_flat()
    return set(fa) == set(fb) and all(np.array_equal(fa[k], fb[k]) for k in fa)


class TestResolve:
    def test_all_ids_resolve(self):
        for mid in METHOD_IDS:
            assert resolve_method(mid).id == mid

    def test_unknown_rejected(self):
        with pytest.raises(ConfigError):
            resolve_method("ewc")

    def test_compute_multipliers(self):
        assert resolve_method("oracle").compute_multiplier_at(5) == 5.0
        assert resolve_method("sequential").compute_multiplier_at(5) == 1.0
        assert resolve_method("lwf").compute_multiplier_at(1) == 1.0
        assert resolve_method("lwf").compute_multiplier_at(3) == pytest.approx(1.2)

    def test_init_sources(self):
        assert resolve_method("oracle").init_source == "random"
        assert resolve_method("restart").init_source == "random"
        assert resolve_method("patching").init_source == "last_patched"
        assert resolve_method("cumulative_exp").init_source == "last_checkpoint"


class TestPatchArithmetic:
    def test_endpoints(self):
        a = init_params(DIMS, Rng(1))
        b = init_params(DIMS, Rng(2))
        assert flat_equal(apply_patch(a, b, 0.0), a)
        assert flat_equal(apply_patch(a, b, 1.0), b)

    def test_midpoint_elementwise(self):
        a = init_params(DIMS, Rng(3))
        b = init_params(DIMS, Rng(4))
        mid = apply_patch(a, b, 0.5).to_flat()
        fa, fb = a.to_flat(), b.to_flat()
        for k in mid:
            assert np.allclose(mid[k], 0.5 * fa[k] + 0.5 * fb[k], atol=1e-15)

    def test_alpha_out_of_range(self):
        a = init_params(DIMS, Rng(0))
        with pytest.raises(ConfigError):
            apply_patch(a, a, 1.5)

    def test_shape_mismatch(self):
        a = init_params(DIMS, Rng(0))
        b = init_params(ModelDims(6, 5, 9, 4), Rng(0))
        with pytest.raises(ShapeError):
            apply_patch(a, b, 0.5)


class TestTunePatchAlpha:
    def test_clear_winner_gets_alpha_one(self, stream):
        # new model trained on nothing vs itself: identical models tie on
        # every alpha, so the tie rule selects the largest alpha
        p = init_params(DIMS, Rng(5))
        alpha = tune_patch_alpha(p, p, [stream[0]])
        assert alpha == 1.0

    def test_prefers_better_endpoint(self, stream):
        # a briefly trained model beats a fresh one on step-1 retrieval
        out, _ = run_through("sequential", stream, 1, make_ctx(per_step_iters=60))
        trained = out[0][0].params
        fresh = init_params(DIMS, Rng(99))
        from ticstream.evaluation import retrieval_score

        if retrieval_score(trained, stream[0].eval_retrieval) > retrieval_score(
            fresh, stream[0].eval_retrieval
        ):
            assert tune_patch_alpha(fresh, trained, [stream[0]]) >= 0.5

    def test_bills_eval_macs(self, stream):
        p = init_params(DIMS, Rng(5))
        led = BudgetLedger(10**9)
        tune_patch_alpha(p, p, [stream[0]], ledger=led, step=2)
        assert led.total_eval_macs() > 0
        assert led.total_train_macs() == 0

    def test_requires_eval_sets(self):
        p = init_params(DIMS, Rng(5))
        with pytest.raises(ConfigError):
            tune_patch_alpha(p, p, [])


class TestRunStepBasics:
    def test_deterministic_replay(self, stream):
        a, _ = run_through("cumulative_exp", stream, 3)
        b, _ = run_through("cumulative_exp", stream, 3)
        for (da, *_), (db, *_) in zip(a, b):
            assert flat_equal(da.params, db.params)

    def test_first_step_identical_across_methods(self, stream):
        # at t=1 every method sees the same data, init, and rng keys
        ref, _ = run_through("sequential", stream, 1)
        for mid in METHOD_IDS:
            if mid == "oracle":
                continue  # oracle's longer schedule changes the LR curve
            out, _ = run_through(mid, stream, 1)
            assert flat_equal(out[0][0].params, ref[0][0].params), mid

    def test_methods_diverge_at_second_step(self, stream):
        seq, _ = run_through("sequential", stream, 2)
        cum, _ = run_through("cumulative_all", stream, 2)
        assert not flat_equal(seq[1][0].params, cum[1][0].params)

    def test_missing_prev_checkpoint_rejected(self, stream):
        spec = resolve_method("sequential")
        with pytest.raises(ProtocolError):
            run_step(spec, 2, stream, None, None, make_ctx())

    def test_restart_ignores_history(self, stream):
        # restart's step-2 model must not depend on the step-1 checkpoint
        out, _ = run_through("restart", stream, 2)
        spec = resolve_method("restart")
        ctx = make_ctx(budget_mult=2.0)
        fake_prev = run_through("sequential", stream, 1)[0][0][1]
        deploy, *_ = run_step(spec, 2, stream, fake_prev, None, ctx)
        assert flat_equal(deploy.params, out[1][0].params)

    def test_adam_state_reset_each_step(self, stream):
        out, _ = run_through("cumulative_all", stream, 2)
        deploy = out[1][0]
        assert deploy.adam.step_count == PER_STEP_ITERS

    def test_step_record_fields(self, stream):
        out, _ = run_through("cumulative_all", stream, 2)
        rec = out[1][3]
        assert rec["step"] == 2
        assert rec["iterations"] == PER_STEP_ITERS
        assert rec["train_set_size"] == 80  # all of steps 1 and 2
        assert np.isfinite(rec["mean_loss"])


class TestDataAssembly:
    def test_sequential_uses_only_new(self, stream):
        out, _ = run_through("sequential", stream, 3)
        plan = out[2][3]["plan"]
        assert plan["per_source_counts"] == {}
        assert plan["current_count"] == 40

    def test_cumulative_all_takes_everything(self, stream):
        out, _ = run_through("cumulative_all", stream, 3)
        plan = out[2][3]["plan"]
        assert plan["per_source_counts"] == {"1": 40, "2": 40}

    def test_exp_buffer_at_step_three(self, stream):
        out, _ = run_through("cumulative_exp", stream, 3)
        plan = out[2][3]["plan"]
        assert plan["per_source_counts"] == {"1": 20, "2": 20}

    def test_equal_buffer_at_step_four(self, stream):
        out, _ = run_through("cumulative_equal", stream, 4)
        plan = out[3][3]["plan"]
        counts = plan["per_source_counts"]
        assert sum(counts.values()) == 40
        assert max(counts.values()) - min(counts.values()) <= 1


class TestBudgets:
    def iter_macs(self):
        return macs_per_iteration(init_params(DIMS, Rng(0)), BATCH)

    def test_standard_method_bills_one_budget_per_step(self, stream):
        _, ctx = run_through("cumulative_all", stream, 3)
        c = PER_STEP_ITERS * self.iter_macs()
        for t in (1, 2, 3):
            assert ctx.ledger.train_macs[t] == c

    def test_oracle_bills_t_budgets(self, stream):
        _, ctx = run_through("oracle", stream, 3, make_ctx(budget_mult=1.0))
        c = PER_STEP_ITERS * self.iter_macs()
        assert ctx.ledger.train_macs[1] == c
        assert ctx.ledger.train_macs[2] == 2 * c
        assert ctx.ledger.train_macs[3] == 3 * c

    def test_lwf_bills_teacher_surcharge(self, stream):
        _, ctx = run_through("lwf", stream, 2, make_ctx(budget_mult=1.2))
        c = PER_STEP_ITERS * self.iter_macs()
        assert ctx.ledger.train_macs[1] == c
        assert ctx.ledger.train_macs[2] == pytest.approx(1.2 * c)

    def test_overbudget_step_raises(self, stream):
        ctx = make_ctx(budget_mult=0.5)
        spec = resolve_method("sequential")
        with pytest.raises(Exception):
            run_step(spec, 1, stream, None, None, ctx)


class TestLwfBehavior:
    def test_first_step_matches_sequential(self, stream):
        lwf, _ = run_through("lwf", stream, 1)
        seq, _ = run_through("sequential", stream, 1)
        assert flat_equal(lwf[0][0].params, seq[0][0].params)

    def test_zero_lambda_matches_sequential(self, stream):
        ctx = make_ctx(budget_mult=1.2)
        ctx.lwf_lambda = 0.0
        lwf, _ = run_through("lwf", stream, 2, ctx)
        seq, _ = run_through("sequential", stream, 2)
        assert flat_equal(lwf[1][0].params, seq[1][0].params)

    def test_penalty_changes_solution(self, stream):
        ctx = make_ctx(budget_mult=1.2)
        ctx.lwf_lambda = 5.0
        lwf, _ = run_through("lwf", stream, 2, ctx)
        seq, _ = run_through("sequential", stream, 2)
        assert not flat_equal(lwf[1][0].params, seq[1][0].params)


class TestPatchingMethod:
    def test_first_step_alpha_is_one(self, stream):
        out, _ = run_through("patching", stream, 1, make_ctx(budget_mult=2.0))
        _, _, patch, rec = out[0]
        assert rec["alpha"] == 1.0
        assert patch.alpha_history == [1.0]

    def test_deploy_is_patched_model(self, stream):
        out, _ = run_through("patching", stream, 2, make_ctx(budget_mult=2.0))
        deploy, _, patch, rec = out[1]
        assert flat_equal(deploy.params, patch.patched_params)
        assert 0.0 <= rec["alpha"] <= 1.0

    def test_patched_equals_manual_interpolation(self, stream):
        out, _ = run_through("patching", stream, 2, make_ctx(budget_mult=2.0))
        _, carry2, patch, rec = out[1]
        prev = out[0][2].patched_params
        manual = apply_patch(prev, carry2.params, rec["alpha"])
        assert flat_equal(patch.patched_params, manual)


class TestConstCosine:
    def test_carry_and_deploy_differ(self, stream):
        ctx = make_ctx(kind="const_cosine")
        out, _ = run_through("sequential", stream, 1, ctx)
        deploy, carry, *_ = out[0]
        assert not flat_equal(deploy.params, carry.params)

    def test_carry_feeds_next_step(self, stream):
        # the next step must warm-start from the pre-decay branch
        ctx = make_ctx(kind="const_cosine")
        out, _ = run_through("sequential", stream, 2, ctx)
        assert out[1][3]["step"] == 2

    def test_warmup_cosine_deploy_equals_carry(self, stream):
        out, _ = run_through("sequential", stream, 1)
        deploy, carry, *_ = out[0]
        assert flat_equal(deploy.params, carry.params)
