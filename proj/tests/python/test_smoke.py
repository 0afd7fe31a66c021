import math

import pytest

import margingate as mg

SHIPPED = {1: 1, 2: 2, 4: 4, 8: 8, 16: 16}


@pytest.fixture(scope="module")
def weights():
    return mg.build_model()


@pytest.fixture(scope="module")
def prompts(tmp_path_factory):
    cfg = mg.RunConfig.parse("corpus.prompts = 8\n")
    return mg.Pipeline(cfg, tmp_path_factory.mktemp("corpus")).corpus


def test_bf16_rounding():
    assert mg.round_to_bf16(1.0) == 0x3F80
    assert mg.round_to_bf16(1.00390625) == 0x3F80  # tie to even
    assert mg.round_to_bf16(1.01171875) == 0x3F82  # tie to even, upward
    assert mg.bf16_quantize(3.14159) == 3.140625


def test_chunked_dot_cancellation():
    big = mg.bf16_quantize(1e8)
    a = [big, 1.0, -big, 1.0]
    ones = [1.0] * 4
    assert mg.chunked_dot(a, ones, 1) == 1.0
    assert mg.chunked_dot(a, ones, 2) == 0.0


def test_margin():
    assert mg.margin([3.5, 1.25, 0.0]) == 2.25
    assert mg.margin([2.0, 2.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        mg.margin([1.0])


def test_reference_is_batch_invariant(weights, prompts):
    cfg = mg.DecodeConfig(max_new_tokens=32)
    ref = mg.decode_reference(weights, prompts[0], cfg)
    assert len(ref) == 32
    rows = [prompts[0]] * 8
    batched = mg.decode_batched(weights, rows, cfg, mg.NumericsProfile.reference())
    assert batched[0].tokens == ref.tokens


def test_gate_endpoints(weights, prompts):
    profile = mg.NumericsProfile.reduction_order(SHIPPED)
    ref = mg.decode_reference(weights, prompts[6])
    always = mg.run_margingate(weights, [prompts[6]] * 16, math.inf, profile)
    assert always["tokens"] == ref.tokens
    assert always["stats"]["r_verify"] == 1.0
    never = mg.run_margingate(weights, [prompts[6]] * 16, 0.0, profile)
    plain = mg.decode_batched(weights, [prompts[6]] * 16, mg.DecodeConfig(), profile)[0]
    assert never["tokens"] == plain.tokens
    assert never["stats"]["r_verify"] == 0.0


def test_gate_repairs_known_flip(weights, prompts):
    profile = mg.NumericsProfile.reduction_order(SHIPPED)
    run = mg.run_margingate(weights, [prompts[6]] * 16, 0.0625, profile)
    repairs = [c for c in run["commits"] if c["kind"] == "repair"]
    assert [c["step"] for c in repairs] == [92]
    assert run["stats"]["sequence_deterministic"]


def test_oracle_repair(weights, prompts):
    profile = mg.NumericsProfile.reduction_order(SHIPPED)
    out = mg.run_oracle_repair(weights, [prompts[6]] * 16, profile)
    assert out["deterministic"]
    assert out["repairs"] >= 1


def test_metrics():
    assert mg.find_first_divergence([1, 2, 3], [1, 2, 3]) is None
    assert mg.find_first_divergence([1, 9, 3], [1, 2, 3]) == 1
    assert mg.margin_recall([0.1, 0.3, 0.9], 0.5) == pytest.approx(2 / 3)
    assert mg.summarize_eps([1.0, 4.21])["pert_tau"] == 8.42
    rows = [(0.5, 117, 120), (1.0, 118, 120), (2.0, 118, 120), (4.0, 120, 120)]
    assert mg.select_tau100(rows) == 4.0
    assert mg.select_tau100([(0.5, 1, 2)]) is None
    with pytest.raises(mg.UndefinedMetric):
        mg.margin_recall([], 1.0)


def test_config_round_trip():
    cfg = mg.RunConfig.parse("gate.tau = 1/8\nbatch.sizes = 2,4\n")
    again = mg.RunConfig.parse(cfg.to_text())
    assert again.hash() == cfg.hash()
    with pytest.raises(mg.ConfigError):
        mg.RunConfig.parse("bogus.key = 1\n")


def test_pipeline_gen_corpus(tmp_path):
    cfg = mg.RunConfig.parse("corpus.prompts = 3\ncorpus.length = 5\n")
    p = mg.Pipeline(cfg, tmp_path)
    summary = p.gen_corpus()
    assert summary["prompts"] == 3
    lines = (tmp_path / "corpus.txt").read_text().splitlines()
    assert [list(map(int, line.split())) for line in lines] == p.corpus
    assert p.manifest["config_hash"] == cfg.hash()
