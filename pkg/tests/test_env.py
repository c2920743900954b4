"""Scene generator, grammar, and demonstration contracts."""

import json

import numpy as np
import pytest

from bgrto import env, rng
from bgrto.env import (
    EnvConfig,
    EnvConfigError,
    GrammarUsageError,
    ToolPrompt,
    generate_scene,
    micro_grammar,
    parse_action_tokens,
    render_observation,
    scripted_demonstration,
    standard_grammar,
)

CFG = EnvConfig()
GRAMMAR = standard_grammar(CFG)


def test_scene_determinism():
    a = generate_scene(7, "source", CFG)
    b = generate_scene(7, "source", CFG)
    assert json.dumps(a.to_json_dict(), sort_keys=True) == json.dumps(b.to_json_dict(), sort_keys=True)


def test_scene_geometry_independent_of_domain():
    a = generate_scene(123, "source", CFG)
    b = generate_scene(123, "target", CFG)
    assert [o.rect for o in a.objects] == [o.rect for o in b.objects]
    assert a.instruction == b.instruction
    assert np.array_equal(a.official_gt, a.gt_mask_source)
    assert np.array_equal(b.official_gt, b.gt_mask_target)


def test_erosion_area_of_6x6_target():
    # hand-built scene: one 6x6 rectangle
    obj = env.SceneObject(rect=(2, 3, 7, 8), color=0, size_class=env.SIZE_LARGE)
    eroded = env.eroded_rect(obj.rect)
    assert eroded == (3, 4, 6, 7)
    assert (eroded[2] - eroded[0] + 1) * (eroded[3] - eroded[1] + 1) == 16
    assert env.erosion_ceiling(obj.rect) == pytest.approx(16 / 36)
    # and through the generator: a forced 6x6 target erodes to exactly 16 cells
    cfg = EnvConfig(width=10, height=10, colors=2, min_objects=1, max_objects=1,
                    min_side=6, max_side=6, small_area_threshold=20)
    scene = generate_scene(4, "target", cfg)
    assert int(scene.gt_mask_target.sum()) == 16


def test_unambiguous_color_targets_unique_match():
    for seed in range(40):
        scene = generate_scene(seed, "source", CFG)
        color_tok = scene.instruction[1] - 8  # color tokens sit after the 8 base words
        matches = [i for i, o in enumerate(scene.objects) if o.color == color_tok]
        if len(matches) == 1:
            assert scene.target_ids == (matches[0],)


def test_largest_match_disambiguation():
    for seed in range(60):
        scene = generate_scene(seed, "source", CFG)
        target = scene.objects[scene.target_ids[0]]
        color = target.color
        if scene.instruction[0] == 5 or scene.instruction[0] == 6:  # size-qualified template
            continue
        matches = [o for o in scene.objects if o.color == color]
        assert target.area == max(o.area for o in matches)


def test_small_grid_rejected():
    with pytest.raises(EnvConfigError):
        generate_scene(0, "source", EnvConfig(width=5, height=8, max_side=4))


def test_bad_domain_rejected():
    with pytest.raises(EnvConfigError):
        generate_scene(0, "shifted", CFG)


def test_observation_dims_contract():
    scene = generate_scene(3, "target", CFG)
    obs = render_observation(scene)
    assert obs.shape == (16 * 16 * 5 + 3 * 12,)
    assert obs.shape[0] == 1316
    assert env.observation_dim(CFG) == 1316


def test_empty_grid_observation_is_background():
    scene = env.GridScene(
        width=16, height=16, colors=4, objects=(), instruction=(0, 8, 2),
        gt_mask_source=np.zeros((16, 16), dtype=bool),
        gt_mask_target=np.zeros((16, 16), dtype=bool),
        target_ids=(), seed=0, domain="source",
    )
    obs = render_observation(scene)
    occ = obs[: 16 * 16 * 5].reshape(-1, 5)
    assert np.array_equal(occ[:, 4], np.ones(256))  # background channel
    assert np.array_equal(occ[:, :4], np.zeros((256, 4)))


def test_instruction_only_difference():
    base = generate_scene(11, "source", CFG)
    other = env.GridScene(
        width=base.width, height=base.height, colors=base.colors, objects=base.objects,
        instruction=(0, 9, 3), target_ids=base.target_ids,
        gt_mask_source=base.gt_mask_source, gt_mask_target=base.gt_mask_target,
        seed=base.seed, domain=base.domain,
    )
    a = render_observation(base)
    b = render_observation(other)
    occ_len = 16 * 16 * 5
    assert np.array_equal(a[:occ_len], b[:occ_len])
    assert not np.array_equal(a[occ_len:], b[occ_len:])


def test_parse_standard_valid():
    prompt = parse_action_tokens([1, 1, 2, 3, 5, 6, 0], GRAMMAR)
    assert prompt == ToolPrompt(color=1, size=env.SIZE_LARGE, boxes=((2, 3, 5, 6),))


def test_parse_reversed_box_invalid():
    assert parse_action_tokens([1, 1, 5, 3, 2, 6, 0], GRAMMAR) is None
    assert parse_action_tokens([1, 1, 2, 6, 5, 3, 0], GRAMMAR) is None


def test_parse_wildcard_size():
    prompt = parse_action_tokens([0, 2, 0, 0, 0, 0, 0], GRAMMAR)
    assert prompt.size is None


def test_parse_out_of_vocab_invalid():
    assert parse_action_tokens([99, 1, 2, 3, 5, 6, 0], GRAMMAR) is None


def test_parse_wrong_length_is_usage_error():
    with pytest.raises(GrammarUsageError):
        parse_action_tokens([0, 1, 2], GRAMMAR)


def test_micro_parse_table_lookup():
    grammar = micro_grammar(CFG)
    prompt = parse_action_tokens([2, 4], grammar)
    assert prompt.color == 2 and prompt.size is None
    assert prompt.boxes == (grammar.preset_boxes[4],)
    assert len(grammar.preset_boxes) == 9
    for x1, y1, x2, y2 in grammar.preset_boxes:
        assert 0 <= x1 <= x2 < CFG.width and 0 <= y1 <= y2 < CFG.height


def test_demo_noise_zero_matches_target():
    for seed in range(20):
        scene = generate_scene(seed, "target", CFG)
        tokens = scripted_demonstration(scene, 0.0, rng.stream(seed, "demo"), GRAMMAR)
        prompt = parse_action_tokens(tokens, GRAMMAR)
        assert prompt is not None
        assert prompt.boxes[0] == scene.objects[scene.target_ids[0]].rect


def test_demo_noise_one_is_uniform_over_alternatives():
    scene = generate_scene(5, "target", CFG)
    correct = env.correct_tokens(scene, GRAMMAR)
    gen = rng.stream(5, "demo-noisy")
    counts = np.zeros((GRAMMAR.l_max, max(GRAMMAR.step_sizes)))
    draws = 3000
    for _ in range(draws):
        tokens = scripted_demonstration(scene, 1.0, gen, GRAMMAR)
        for pos, tok in enumerate(tokens):
            assert 0 <= tok < GRAMMAR.step_sizes[pos]
            counts[pos, tok] += 1
    for pos, size in enumerate(GRAMMAR.step_sizes):
        if size < 2:
            continue
        # replacement excludes the correct token and is uniform over the rest
        assert counts[pos, correct[pos]] == 0
        others = np.delete(counts[pos, :size], correct[pos])
        assert np.all(np.abs(others / draws - 1.0 / (size - 1)) < 4.0 / np.sqrt(draws))


def test_demo_corruption_rate():
    # noise 0.1 over 10k draws: per-position mismatch rate 0.1 +/- 0.01
    scene = generate_scene(9, "target", CFG)
    correct = env.correct_tokens(scene, GRAMMAR)
    gen = rng.stream(9, "demo-rate")
    draws = 10_000
    mismatches = np.zeros(GRAMMAR.l_max)
    for _ in range(draws):
        tokens = scripted_demonstration(scene, 0.1, gen, GRAMMAR)
        mismatches += [int(t != c) for t, c in zip(tokens, correct)]
    rates = mismatches / draws
    for pos, size in enumerate(GRAMMAR.step_sizes):
        if size < 2:
            assert rates[pos] == 0.0  # EOS has no alternative
        else:
            assert abs(rates[pos] - 0.1) < 0.01


def test_masks_erosion_contract():
    for seed in range(30):
        scene = generate_scene(seed, "target", CFG)
        assert np.all(scene.gt_mask_target <= scene.gt_mask_source)  # erosion is contractive
        assert scene.gt_mask_source.sum() >= 1
        assert scene.gt_mask_target.sum() >= 1


def test_env_hash_stability():
    assert env.env_config_hash(CFG) == env.env_config_hash(EnvConfig())
    assert env.env_config_hash(CFG) != env.env_config_hash(EnvConfig(width=17))
