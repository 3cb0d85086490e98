from setuptools import setup

setup(
    name="rpo-personalize",
    version="0.1.0",
    description="Reflective personalization pipeline tooling for black-box language models",
    py_modules=[
        "data_processing",
        "lamp_dataset",
        "llm_utils",
        "main",
        "metrics",
        "pipeline",
        "profile_retrieval",
        "prompt_templates",
        "rl_rollouts",
        "run_config",
        "structured_output",
        "task_config",
        "trajectory",
    ],
    package_data={"": ["templates/*/*.txt"]},
    include_package_data=True,
    python_requires=">=3.9",
    install_requires=[
        "openai>=1.0.0",
        "pandas>=2.0.0",
        "numpy>=1.26.0",
        "scikit-learn",
        "python-dotenv",
        "tenacity>=8.2.0",
        "requests>=2.31.0",
    ],
    entry_points={"console_scripts": ["rpo=main:main"]},
)
