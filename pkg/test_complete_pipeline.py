"""
Complete Robustness Pipeline Test
Phase 1: Train Vanilla and R2ET on the synthetic suite
Phase 2: ERAttack vs MSE attack on the Vanilla model
Phase 3: Defense ordering under ERAttack
Phase 4: Thickness vs Hessian norm as predictors of attack difficulty
Phase 5: Model-level thickness across training methods
"""

import os
from dataclasses import replace

import numpy as np

from src.components.curvature import power_iteration
from src.components.network import DenseNet
from src.config.configuration import AttackConfig, config_from_dict
from src.logger import logger
from src.pipelines.experiment_pipeline import ExperimentPipeline
from src.services.attacks import first_flip_scan
from src.services.evaluator import correlation

SUITE = {
    "name": "synthetic",
    "seed": 0,
    "data": {"n_features": 16, "n_samples": 2000, "class_separation": 3.0},
    "train": {"hidden": [32], "epochs": 30, "batch_size": 64, "lr": 0.05, "k": 4, "lambda1": 0.1, "lambda2": 0.01},
    "attack": {"k": 4, "step_size": 0.01, "max_iters": 200},
    "thickness": {"m1": 32, "m2": 8, "epsilon": 0.5},
    "n_eval_samples": 50,
}


def banner(title: str):
    print("\n" + "=" * 80)
    print(title)
    print("=" * 80)


def phase_1_train(base, out_root: str, methods):
    """
    Phase 1: Train one model per method with matched seed and architecture
    """
    banner("PHASE 1: TRAINING")
    trained = {}
    for method in methods:
        print(f"\n🔧 Training {method}...")
        config = replace(base, name=method, train=replace(base.train, method=method))
        pipeline = ExperimentPipeline(config, os.path.join(out_root, method, "train"))
        record = pipeline.run_train()
        trained[method] = (pipeline, record)
        print(f"✅ {method}: accuracy={record.aggregates['train_accuracy']:.4f}, AUC={record.aggregates.get('test_auc', float('nan')):.4f}")
    return trained


def mean_p_at_k(model, features, attack: AttackConfig) -> float:
    scan = first_flip_scan(model, features, attack)
    return float(np.mean([r.final_p_at_k for r in scan.results if r is not None]))


def phase_2_attack_ordering(pipeline, model, features) -> bool:
    banner("PHASE 2: ERATTACK vs MSE ATTACK")
    attack = pipeline.config.attack
    ok, strict = True, False
    for step in (0.005, 0.01, 0.02):
        er = mean_p_at_k(model, features, replace(attack, method="erattack", step_size=step))
        mse = mean_p_at_k(model, features, replace(attack, method="mse", step_size=step))
        print(f"step={step}: P@k ERAttack={er:.4f}, MSE={mse:.4f}")
        ok = ok and er <= mse
        strict = strict or mse - er >= 0.05
    passed = ok and strict
    print("✅ ERAttack is the stronger attack" if passed else "❌ ordering not observed")
    return passed


def phase_3_defense_ordering(trained, features) -> bool:
    banner("PHASE 3: DEFENSE ORDERING")
    scores = {}
    for method in ("vanilla", "r2et"):
        pipeline, record = trained[method]
        model = DenseNet.load(record.model_path)
        scores[method] = (mean_p_at_k(model, features, pipeline.config.attack), record.aggregates.get("test_auc", 0.0))
        print(f"{method}: P@k={scores[method][0]:.4f}, AUC={scores[method][1]:.4f}")
    passed = scores["r2et"][0] >= scores["vanilla"][0] + 0.05 and abs(scores["r2et"][1] - scores["vanilla"][1]) <= 0.02
    print("✅ R2ET keeps more of the top-k" if passed else "❌ defense ordering not observed")
    return passed


def phase_4_correlation(pipeline, model, dataset) -> bool:
    banner("PHASE 4: THICKNESS vs HESSIAN NORM")
    config = replace(pipeline.config, n_eval_samples=200)
    thickness_pipeline = ExperimentPipeline(config, os.path.join(pipeline.out_dir, "..", "thickness"))
    record = thickness_pipeline.run_thickness(model, dataset)
    features = dataset.features[:200]
    scan = first_flip_scan(model, features, config.attack)
    kept = [i for i, flip in enumerate(scan.iterations) if flip is not None]
    flips = [scan.iterations[i] for i in kept]
    thickness = [record.rows[i]["thickness"] for i in kept]
    classes = np.atleast_1d(model.predict(features))
    norms, _ = power_iteration(model, features, classes)
    rho_thickness = correlation(thickness, flips)
    rho_hessian = correlation(norms[kept], flips)
    print(f"Spearman(thickness, first flip) = {rho_thickness:.4f}")
    print(f"Spearman(Hessian norm, first flip) = {rho_hessian:.4f}")
    passed = abs(rho_thickness) > abs(rho_hessian) and rho_thickness >= 0.3
    print("✅ thickness is the better predictor" if passed else "❌ correlation pattern not observed")
    return passed


def phase_5_model_level(trained, dataset) -> bool:
    banner("PHASE 5: MODEL-LEVEL THICKNESS")
    levels, robustness = [], []
    for method, (pipeline, record) in trained.items():
        model = DenseNet.load(record.model_path)
        thickness = ExperimentPipeline(pipeline.config, os.path.join(pipeline.out_dir, "..", "thickness")).run_thickness(model, dataset)
        levels.append(thickness.aggregates["model_thickness"])
        robustness.append(mean_p_at_k(model, dataset.features[:50], pipeline.config.attack))
        print(f"{method}: thickness={levels[-1]:.4f}, P@k={robustness[-1]:.4f}")
    rho = correlation(levels, robustness)
    print(f"Spearman(model thickness, P@k) = {rho:.4f}")
    passed = rho >= 0.5
    print("✅ thicker models are more robust" if passed else "❌ model-level ordering not observed")
    return passed


if __name__ == "__main__":
    banner("ROBUSTNESS PIPELINE TEST")
    out_root = os.path.join(os.getcwd(), "runs", "complete_pipeline")
    base = config_from_dict(SUITE)
    methods = ["vanilla", "wd", "est_h", "ssr", "r2et", "r2et_noh"]
    print(f"\n📁 Output: {out_root}")
    print(f"🧪 Methods: {methods}")

    try:
        trained = phase_1_train(base, out_root, methods)
        vanilla_pipeline, vanilla_record = trained["vanilla"]
        vanilla = DenseNet.load(vanilla_record.model_path)
        dataset = vanilla_pipeline.evaluation_data()
        features = dataset.features[:50]

        results = {
            "attack ordering": phase_2_attack_ordering(vanilla_pipeline, vanilla, features),
            "defense ordering": phase_3_defense_ordering(trained, features),
            "thickness correlation": phase_4_correlation(vanilla_pipeline, vanilla, dataset),
            "model-level ordering": phase_5_model_level(trained, dataset),
        }
    except Exception as e:
        logger.error(f"Pipeline test failed: {e}")
        print(f"\n❌ Pipeline test failed: {e}")
        raise

    banner("SUMMARY")
    for name, passed in results.items():
        print(f"{'✅' if passed else '❌'} {name}")
    print("\n" + "🎉" * 40)
    print("TEST FINISHED!")
