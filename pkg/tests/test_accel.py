import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from approxfl.accel import (ACCELERATORS, BUFFERS, AcceleratorConfig, CapacityError, EnergyLedger, EnergyTable,
                            accelerator, count_accesses, minibatch_energy, price, tile_conv, trace_energy)
from approxfl.models import cnn, resnet
from approxfl.trace import LayerOp, TrainStepTrace

# One 3x3 convolution, 16 -> 16 channels, 8x8 map, batch 1, stride 1.
CONV = dict(layer="conv", kind="conv", batch=1, in_ch=16, out_ch=16, kernel=3, stride=1,
            in_hw=(8, 8), out_hw=(8, 8), params=16 * 16 * 9)


def _conv_trace():
    t = TrainStepTrace(batches=1)
    t.add(LayerOp(phase="forward", saved=16 * 64, **CONV))
    t.add(LayerOp(phase="grad", **CONV))
    t.add(LayerOp(phase="update", **CONV))
    return t


def test_walkthrough_counts_c1():
    # [DERIVED] traced by hand:
    #   one 16x16 tile per tap -> 9 passes, 64 streamed vectors, 32-bit words
    #   SA   9 * 256 * 64                          = 147456 charged MACs per phase
    #   IBuf 9 passes * 64 vectors * 16 words * 32 = 294912 bits per phase
    #   WBuf 9 * 64 * 256 * 32                     = 4718592 bits per phase
    #   OBuf 64 * 16 * (2 * 9 - 1) * 32            = 557056 bits per phase
    #   forward DRAM: weights in (2304 words), saved input out (1024 words)
    #   grad DRAM: weights in; update DRAM: saved input in, weight gradient out
    c = count_accesses(_conv_trace(), accelerator("C1"))
    fw, gr, up = c.phases["forward"], c.phases["grad"], c.phases["update"]
    for p in (fw, gr, up):
        assert p.sa_macs == 147456 and p.utilized_macs == 147456 and p.padded_macs == 0
    assert fw.sram_bits == {"ibuf": 294912 + 32768, "wbuf": 4718592 + 73728, "obuf": 557056, "inmem": 0, "vmem": 0}
    assert fw.dram_bits == 106496
    assert gr.sram_bits == {"ibuf": 294912, "wbuf": 4718592 + 73728, "obuf": 557056, "inmem": 0, "vmem": 0}
    assert gr.dram_bits == 73728
    assert up.sram_bits == {"ibuf": 294912 + 32768, "wbuf": 4718592, "obuf": 557056 + 73728, "inmem": 0, "vmem": 0}
    assert up.dram_bits == 106496


def test_walkthrough_energy_c1():
    led = trace_energy(_conv_trace(), accelerator("C1"))
    # SA: 3 * 147456 MACs * 26.8 pJ
    assert led.e_sa == pytest.approx(3 * 147456 * 26.8e-12, rel=1e-12)
    sram_bits = 3 * (294912 + 4718592 + 557056) + 2 * 32768 + 2 * 73728 + 73728
    assert led.e_sram_total == pytest.approx(sram_bits * 0.401e-12, rel=1e-12)
    assert led.e_dram == pytest.approx((106496 + 73728 + 106496) * 41.0e-12, rel=1e-12)
    assert led.e_simd == 0.0


def test_walkthrough_c3_halves_bits():
    c1 = count_accesses(_conv_trace(), accelerator("C1")).total()
    c3 = count_accesses(_conv_trace(), accelerator("C3")).total()
    assert c3.sa_macs == c1.sa_macs
    assert all(2 * c3.sram_bits[b] == c1.sram_bits[b] for b in BUFFERS)
    assert 2 * c3.dram_bits == c1.dram_bits
    led = trace_energy(_conv_trace(), accelerator("C3"))
    assert led.e_sa == pytest.approx(3 * 147456 * 3.11e-12, rel=1e-12)


def test_padding_charged_for_partial_tiles():
    # 17 reduction channels need two row tiles; the second is 1/16 full
    t = tile_conv(17, 16, 3, 64)
    assert t.sa_passes == 18
    assert t.utilized_macs == 17 * 16 * 9 * 64
    assert t.charged_macs == 18 * 256 * 64
    assert t.padded_macs == t.charged_macs - t.utilized_macs
    with pytest.raises(ValueError):
        tile_conv(0, 16)


@given(st.integers(1, 80), st.integers(1, 80), st.sampled_from([1, 3]), st.integers(1, 50))
def test_tiling_properties(rows, cols, k, n):
    t = tile_conv(rows, cols, k, n)
    assert t.charged_macs >= t.utilized_macs == rows * cols * k * k * n
    assert (t.padded_macs == 0) == (rows % 16 == 0 and cols % 16 == 0)
    assert t.charged_macs < (rows + 16) * (cols + 16) * k * k * n


def test_table_one_constants():
    # [PAPER] pJ per op and per bit, compared bitwise
    t = EnergyTable()
    assert t.mac_pj == {"fp32/exact": 26.8, "bfloat16/exact": 5.35, "bfloat16/mbm-7": 3.11,
                        "bfloat12/mbm-3": 2.78, "bfloat10/mbm-1": 2.65}
    assert t.alu_pj == 31.4
    assert t.sram_pj_per_bit == {64: 0.401, 60: 0.412}
    assert t.dram_pj_per_bit == 41.0
    assert [accelerator(c).mac_key for c in ("C1", "C2", "C3", "C4", "C5")] == list(t.mac_pj)
    assert [accelerator(c).sram_bus_bits for c in ("C1", "C2", "C3", "C4", "C5")] == [64, 64, 64, 60, 60]


def test_table_round_trip_and_validation(tmp_path):
    t = EnergyTable()
    p = tmp_path / "t.json"
    import json
    p.write_text(json.dumps(t.to_dict()))
    assert EnergyTable.load(p) == t
    with pytest.raises(ValueError):
        EnergyTable.from_dict({"mac": {}})
    with pytest.raises(ValueError):
        EnergyTable(alu_pj=0)
    with pytest.raises(KeyError):
        minibatch_energy(cnn(), accelerator("MIT-7"))
    custom = EnergyTable.from_dict({"mac_pj": {"bfloat16/mitchell-7": 2.9}})
    assert minibatch_energy(cnn(), accelerator("MIT-7"), table=custom).total > 0


def test_accelerator_validation():
    from approxfl.arith import BFLOAT16, MultiplierSpec
    with pytest.raises(ValueError):
        AcceleratorConfig("x", BFLOAT16, MultiplierSpec.mbm(3))
    with pytest.raises(ValueError):
        AcceleratorConfig("x", BFLOAT16, MultiplierSpec.mbm(7), sram_bus_bits=60)
    with pytest.raises(KeyError):
        accelerator("C9")


def test_additivity_of_traces():
    m = cnn()
    a, b = m.trace_step(16), m.trace_step(7)
    cfg = accelerator("C4")
    la, lb, lab = trace_energy(a, cfg), trace_energy(b, cfg), trace_energy(a + b, cfg)
    assert lab.sa_ops == la.sa_ops + lb.sa_ops
    assert lab.sram_bits == {k: la.sram_bits[k] + lb.sram_bits[k] for k in BUFFERS}
    assert lab.dram_bits == la.dram_bits + lb.dram_bits
    assert lab.total == pytest.approx((la + lb).total, rel=1e-12)
    doubled = TrainStepTrace()
    doubled.extend(a)
    doubled.extend(a)
    assert trace_energy(doubled, cfg).total == pytest.approx(2 * la.total, rel=1e-12)


def test_conservation_and_shares():
    led = minibatch_energy(resnet(8), accelerator("C2"), 8)
    assert led.total == pytest.approx(led.e_sa + led.e_simd + led.e_sram_total + led.e_dram, rel=1e-15)
    assert sum(led.shares().values()) == pytest.approx(1.0, abs=1e-12)
    assert led.e_mem + led.e_comp == led.total


def test_monotonic_in_batch_and_precision():
    m = resnet(8)
    totals = [minibatch_energy(m, accelerator("C1"), b).total for b in (1, 4, 16)]
    assert totals == sorted(totals)
    levels = [minibatch_energy(m, accelerator(c), 16).total for c in ("C1", "C2", "C3", "C4", "C5")]
    assert levels == sorted(levels, reverse=True)


def test_bit_width_scaling_of_memory():
    m = resnet(8)
    c1 = count_accesses(m.trace_step(4), accelerator("C1")).total()
    c2 = count_accesses(m.trace_step(4), accelerator("C2")).total()
    assert all(c1.sram_bits[b] == 2 * c2.sram_bits[b] for b in BUFFERS)
    n = m.num_params()
    # optimizer master copy stays 32-bit: params * (2 * 32 + w)
    assert c1.dram_bits - n * 96 == 2 * (c2.dram_bits - n * 80)


def test_empty_trace_prices_to_zero():
    led = trace_energy(TrainStepTrace(), accelerator("C1"))
    assert led.total == 0 and led.shares()["sa"] == 0


def test_capacity_error():
    small = dataclasses.replace(accelerator("C1"), dram_bytes=1000)
    with pytest.raises(CapacityError):
        minibatch_energy(cnn(), small)


def test_ledger_serialisation():
    led = minibatch_energy(cnn(), accelerator("C1"))
    row = led.row()
    assert row["e_total"] == led.total
    assert led.to_csv().splitlines()[0].split(",") == list(row)
    import json
    assert json.loads(led.to_json())["sa_ops"] == led.sa_ops
    z = EnergyLedger() + led
    assert z.total == led.total


def test_presets_table():
    assert set(ACCELERATORS) >= {"C1", "C2", "C3", "C4", "C5"}
    assert accelerator("C5").storage_format.width == 10
    assert price(count_accesses(_conv_trace(), accelerator("C5"))).e_sa == pytest.approx(
        3 * 147456 * 2.65e-12, rel=1e-12)
    assert np.isclose(minibatch_energy(resnet(20), accelerator("C1")).total, 0.2109, rtol=5e-3)
