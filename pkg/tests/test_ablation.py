from workflows.ablation import default_architecture, run_ablation


def test_default_architecture_alternates():
    assert default_architecture(5) == [6, 0, 6, 0, 6]


def test_hybrid_and_order_studies(tiny_config, tiny_split):
    results, timings = run_ablation(tiny_config, tiny_split, predictor=None, studies=["hybrid", "order"])
    assert set(results) == {"hybrid", "order"}
    assert [row["hybrid"] for row in results["hybrid"]["rows"]] == [True, False]
    assert 0.0 <= results["hybrid"]["summary"]["mean_acc_hybrid"] <= 1.0
    order = results["order"]["summary"]
    assert order["depth_equal"] and order["latency_equal"]
    assert set(timings) == {"hybrid", "order"}


def test_elastic_factorial(tiny_config, tiny_split):
    results, _ = run_ablation(tiny_config, tiny_split, predictor=None, arch=[6, 7], studies=["elastic"])
    rows = results["elastic"]["rows"]
    assert {(row["distill"], row["calibrate"]) for row in rows} == {
        (True, True), (True, False), (False, True), (False, False)
    }
    assert all(row["resolution"] == 8 for row in rows)
    assert 0 <= results["elastic"]["summary"]["seeds_calibration_helps"] <= 1
