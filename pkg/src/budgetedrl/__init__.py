from budgetedrl._budgetedrl import (
    ExperimentConfig,
    evaluate,
    explore,
    load_experiment_config,
    run_experiment,
    run_seed,
    save_resolved_config,
    solve_bvi,
    train_bftq,
    train_ftq_lambda,
    witness_noncontraction,
)

__version__ = "0.1.0"
