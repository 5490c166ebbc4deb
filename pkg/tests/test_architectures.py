import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from collabdistill.architectures import (
    VGG19_LAYOUT,
    ArchSpec,
    build_encoder,
    build_mirror_decoder,
    conv_macs,
    count_flops,
    count_macs,
    count_params,
    count_params_cascade,
    dump_spec,
    estimate_peak_activation_memory,
    init_student_from_teacher,
    load_spec,
    preset,
    select_filters_l1,
)
from collabdistill.errors import PreconditionError, SpecificationError


def conv_pairs(net):
    return [(c.in_channels, c.out_channels) for c in net.convs]


class TestArchSpec:
    def test_reference_taps(self):
        assert preset("vgg19").tap_channels() == (64, 128, 256, 512, 512)

    def test_quarter_taps(self):
        assert preset("vgg19").scaled(0.25).tap_channels() == (16, 32, 64, 128, 128)

    def test_rounding_min_one(self):
        spec = ArchSpec(max_stage=1, layout=((3,),), width_factor=0.1)
        assert spec.widths == ((1,),)

    @pytest.mark.parametrize("kwargs", [
        dict(max_stage=0),
        dict(max_stage=6),
        dict(max_stage=1, layout=((0,),)),
        dict(max_stage=1, width_factor=0.0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SpecificationError):
            ArchSpec(**kwargs)

    def test_yaml_round_trip(self, tmp_path):
        for spec in (preset("toy"), preset("vgg19-quarter"), ArchSpec(2, ((5, 6), (7,)))):
            dump_spec(spec, tmp_path / "s.yaml")
            loaded = load_spec(tmp_path / "s.yaml")
            assert loaded.widths == spec.widths and loaded.max_stage == spec.max_stage

    def test_explicit_layout_overrides_factor(self):
        spec = ArchSpec.from_dict({"max_stage": 1, "layout": [[8]], "width_factor": 0.5})
        assert spec.widths == ((8,),)


class TestBuild:
    def test_single_layer_encoder(self):
        enc = build_encoder(ArchSpec(max_stage=1, layout=((64,),)), seed=0)
        assert conv_pairs(enc) == [(3, 64)]
        x = torch.rand(3, 8, 8)
        assert torch.all(enc(x) >= 0)

    def test_single_layer_decoder(self):
        dec = build_mirror_decoder(ArchSpec(max_stage=1, layout=((64,),)))
        assert conv_pairs(dec) == [(64, 3)]

    def test_stage2_mirror(self):
        dec = build_mirror_decoder(preset("vgg19").at_stage(2))
        assert conv_pairs(dec) == [(128, 64), (64, 64), (64, 3)]
        kinds = [l.kind for l in dec.plan]
        assert kinds == ["conv", "upsample", "conv", "conv"]
        assert dec.plan[-1].relu is False

    def test_shape_round_trip(self):
        for k in range(1, 6):
            spec = preset("vgg19-quarter").at_stage(k)
            x = torch.rand(1, 3, 64, 64)
            f = build_encoder(spec, seed=0)(x)
            assert f.shape == (1, spec.out_channels, 64 >> (k - 1), 64 >> (k - 1))
            assert build_mirror_decoder(spec, seed=0)(f).shape == x.shape

    def test_tap_shapes(self):
        spec = preset("toy")
        taps = build_encoder(spec, seed=0).taps(torch.rand(2, 3, 16, 16))
        assert [tuple(t.shape) for t in taps] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4)]

    def test_seeded_init_reproducible(self):
        a, b = build_encoder(preset("toy"), seed=5), build_encoder(preset("toy"), seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)

    def test_fan_in_bound(self):
        enc = build_encoder(preset("toy"), seed=0)
        for conv in enc.convs:
            bound = np.sqrt(6.0 / (conv.in_channels * 9))
            assert conv.weight.abs().max() <= bound
            assert torch.count_nonzero(conv.bias) == 0


class TestCounters:
    def test_single_conv_params(self):
        assert count_params(ArchSpec(max_stage=1, layout=((4,),))) == 112

    def test_empty_spec(self):
        spec = ArchSpec(max_stage=1, layout=())
        assert count_params(spec) == 0
        assert count_flops(spec, 4, 4) == 0

    @pytest.mark.parametrize("name", ["toy", "toy-quarter", "vgg19", "vgg19-quarter"])
    def test_params_match_brute_force(self, name):
        spec = preset(name)
        enc, dec = build_encoder(spec), build_mirror_decoder(spec)
        assert count_params(spec) == sum(p.numel() for p in enc.parameters())
        assert count_params(spec, include_decoder=True) == (
            sum(p.numel() for p in enc.parameters()) + sum(p.numel() for p in dec.parameters())
        )

    def test_single_conv_macs(self):
        assert conv_macs(1, 1, 4, 4) == 144

    def test_flops_single_layer(self):
        spec = ArchSpec(max_stage=1, layout=((1,),))
        assert count_macs(spec, 4, 4) == conv_macs(3, 1, 4, 4)
        assert count_flops(spec, 4, 4) == 2 * 3 * 144

    def test_flops_oracle_by_hooks(self):
        spec = preset("toy")
        enc = build_encoder(spec)
        total = []
        hooks = [c.register_forward_hook(
            lambda m, i, o: total.append(o.numel() * m.in_channels * 9)) for c in enc.convs]
        enc(torch.rand(1, 3, 32, 24))
        for h in hooks:
            h.remove()
        assert count_macs(spec, 32, 24) == sum(total)

    def test_flops_linear_in_area(self):
        spec = preset("toy")
        assert count_flops(spec, 64, 64) == 4 * count_flops(spec, 32, 32)

    def test_flops_quadratic_in_width(self):
        spec = ArchSpec(max_stage=2, layout=((8, 8), (16, 16)))
        ratio = count_flops(spec, 32, 32) / count_flops(spec.scaled(0.5), 32, 32)
        # the 3-channel input layer scales linearly, the rest quadratically
        assert 3.0 < ratio <= 4.0

    def test_indivisible_input(self):
        with pytest.raises(PreconditionError):
            count_flops(preset("toy"), 30, 32)
        assert count_flops(preset("toy"), 30, 32, strict=False) > 0

    def test_memory_single_conv(self):
        assert estimate_peak_activation_memory(ArchSpec(max_stage=1, layout=((4,),)), 2, 2, 4) == 112

    def test_memory_quadruples(self):
        spec = preset("vgg19")
        assert (estimate_peak_activation_memory(spec, 64, 64)
                == 4 * estimate_peak_activation_memory(spec, 32, 32))

    def test_cascade_reference_values(self):
        assert count_params_cascade(preset("vgg19")) == 17_120_384
        assert count_params_cascade(preset("vgg19-quarter")) == 1_072_928


class TestFilterSelection:
    @staticmethod
    def filters(norms):
        return torch.stack([torch.full((1, 1, 1), float(n)) for n in norms])

    def test_largest(self):
        assert select_filters_l1(self.filters([3, 1, 2]), 2) == [0, 2]

    def test_keep_all(self):
        assert select_filters_l1(self.filters([3, 1, 2]), 3) == [0, 1, 2]

    def test_tie_break(self):
        assert select_filters_l1(self.filters([1, 1]), 1) == [0]

    @pytest.mark.parametrize("keep", [0, 4])
    def test_out_of_range(self, keep):
        with pytest.raises(ValueError):
            select_filters_l1(self.filters([3, 1, 2]), keep)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=2, max_size=12), st.data())
    def test_matches_sort_oracle(self, norms, data):
        keep = data.draw(st.integers(1, len(norms)))
        expected = sorted(sorted(range(len(norms)), key=lambda i: (-norms[i], i))[:keep])
        assert select_filters_l1(self.filters(norms), keep) == expected

    def test_invariant_to_permuting_dropped(self):
        norms = [5, 1, 4, 2, 3]
        perm = [5, 2, 4, 1, 3]  # dropped filters 1 and 3 swapped
        assert select_filters_l1(self.filters(norms), 3) == select_filters_l1(self.filters(perm), 3)


class TestStudentInit:
    def test_keep_all_is_copy(self):
        teacher = build_encoder(preset("toy"), seed=0)
        student = init_student_from_teacher(teacher, teacher.spec)
        for p, q in zip(teacher.parameters(), student.parameters()):
            assert torch.equal(p, q)

    def test_single_filter(self):
        teacher = build_encoder(ArchSpec(max_stage=1, layout=((2,),)), seed=0)
        with torch.no_grad():
            teacher.convs[0].weight[0].fill_(5 / 27)
            teacher.convs[0].weight[1].fill_(1 / 27)
        student = init_student_from_teacher(teacher, ArchSpec(max_stage=1, layout=((1,),)))
        assert torch.equal(student.convs[0].weight[0], teacher.convs[0].weight[0])

    def test_input_slicing(self):
        teacher = build_encoder(ArchSpec(max_stage=2, layout=((4, 4), (4,))), seed=3)
        student = init_student_from_teacher(teacher, ArchSpec(max_stage=2, layout=((2, 2), (2,))))
        w1, w2 = teacher.convs[0].weight, teacher.convs[1].weight
        keep1 = select_filters_l1(w1, 2)
        keep2 = select_filters_l1(w2, 2)
        assert_array_equal(student.convs[0].weight.detach(), w1[keep1].detach())
        assert_array_equal(student.convs[1].weight.detach(), w2[keep2][:, keep1].detach())
        assert_array_equal(student.convs[1].bias.detach(), teacher.convs[1].bias[keep2].detach())

    def test_layer_count_mismatch(self):
        teacher = build_encoder(ArchSpec(max_stage=2, layout=((4, 4), (4,))))
        with pytest.raises(SpecificationError):
            init_student_from_teacher(teacher, ArchSpec(max_stage=2, layout=((2,), (2,))))

    def test_wider_student_rejected(self):
        teacher = build_encoder(ArchSpec(max_stage=1, layout=((4,),)))
        with pytest.raises(SpecificationError):
            init_student_from_teacher(teacher, ArchSpec(max_stage=1, layout=((8,),)))
