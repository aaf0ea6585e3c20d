import numpy as np
import pytest
import torch

from bevkd.bevgrid import BevGridSpec, footprint_owner, map_to_bev
from bevkd.config import ExperimentConfig
from bevkd.dataset import box_attributes
from bevkd.labelenc import LabelEncoder, encode_labels, scene_inputs
from bevkd.synthworld import BoxLabel, Scene, generate_scenes

CFG = ExperimentConfig()
GRID = BevGridSpec.for_world(CFG.world, CFG.grid.cells)


@pytest.fixture
def enc():
    torch.manual_seed(0)
    return LabelEncoder.from_config(CFG).eval()


def test_output_shape(enc):
    sc = generate_scenes(CFG.world, 1)[0]
    out = encode_labels(enc, sc, GRID, CFG.world)
    assert out.shape == (1, CFG.model.teacher_channels, GRID.H, GRID.W)


def test_empty_scenes_encode_identically(enc):
    a = encode_labels(enc, Scene(0, []), GRID, CFG.world)
    b = encode_labels(enc, Scene(7, []), GRID, CFG.world)
    assert torch.equal(a, b)
    zero = enc.refine(torch.zeros(1, CFG.model.label_dim, GRID.H, GRID.W))
    assert torch.equal(a, zero)


def test_position_blind_duplicates_share_a_vector():
    torch.manual_seed(0)
    enc = LabelEncoder.from_config(CFG, position_blind=True)
    boxes = [BoxLabel(1, -7.3, 12.1, 1.4, 2.0, 0.4), BoxLabel(1, 8.9, 30.6, 1.4, 2.0, 0.4)]
    onehot, attrs, _ = scene_inputs(Scene(0, boxes), GRID, CFG.world)
    v = enc.object_vectors(onehot, attrs)
    assert torch.equal(v[0], v[1])


def test_position_aware_vectors_differ(enc):
    boxes = [BoxLabel(1, -7.3, 12.1, 1.4, 2.0, 0.4), BoxLabel(1, 8.9, 30.6, 1.4, 2.0, 0.4)]
    onehot, attrs, _ = scene_inputs(Scene(0, boxes), GRID, CFG.world)
    v = enc.object_vectors(onehot, attrs)
    assert not torch.equal(v[0], v[1])


def test_in_cell_offsets(enc):
    x, y = GRID.cell_center(10, 4)
    b = BoxLabel(0, x + 0.25 * GRID.cell_size, y - 0.125 * GRID.cell_size, 2, 4, 0)
    z = enc.box_inputs(torch.as_tensor(box_attributes([b], CFG.world)))
    assert z[0, 6].item() == pytest.approx(0.25, abs=1e-5)
    assert z[0, 7].item() == pytest.approx(-0.125, abs=1e-5)


def test_pre_refine_equals_mapping_of_direct_vectors(enc):
    sc = generate_scenes(CFG.world, 3)[2]
    onehot, attrs, owner = scene_inputs(sc, GRID, CFG.world)
    with torch.no_grad():
        # compose the two MLPs by hand, layer by layer
        z = enc.box_inputs(attrs)
        c1, c2 = enc.phi_cls[0], enc.phi_cls[2]
        b1, b2 = enc.phi_box[0], enc.phi_box[2]
        v_cls = torch.relu(onehot @ c1.weight.T + c1.bias) @ c2.weight.T + c2.bias
        v_box = torch.relu(z @ b1.weight.T + b1.bias) @ b2.weight.T + b2.bias
        v = (v_cls + v_box).numpy()
        expected = map_to_bev(v, sc.boxes, GRID)
        got = enc.pre_refine(onehot, attrs, owner)[0].permute(1, 2, 0).numpy()
    assert np.allclose(got, expected, atol=1e-6)
    # exact placement: background cells are exactly zero
    assert not got[footprint_owner(sc.boxes, GRID) < 0].any()


def test_permutation_invariance_for_disjoint_footprints(enc):
    for sc in generate_scenes(CFG.world, 20):
        perm = list(reversed(range(len(sc.boxes))))
        shuffled = Scene(sc.scene_id, [sc.boxes[k] for k in perm])
        a = encode_labels(enc, sc, GRID, CFG.world)
        b = encode_labels(enc, shuffled, GRID, CFG.world)
        assert torch.allclose(a, b, atol=1e-6)


def test_forward_batch_matches_per_scene(enc):
    from bevkd.dataset import SceneTensors
    scenes = generate_scenes(CFG.world, 5)
    st = SceneTensors(scenes, CFG, GRID)
    with torch.no_grad():
        batched = enc.forward_batch(st.batch([3, 1, 4]))
        for r, s in enumerate([3, 1, 4]):
            single = encode_labels(enc, scenes[s], GRID, CFG.world)
            assert torch.allclose(batched[r], single[0], atol=1e-5)
