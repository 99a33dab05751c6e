from setuptools import setup, find_packages
from typing import List

# Declaring variables for setup functions
PROJECT_NAME = "RankShield"
VERSION = "0.1.0"
AUTHOR = "RankShield contributors"
DESRCIPTION = "Training, attacking and measuring the robustness of top-k gradient explanation rankings for dense classifiers: ranking thickness, the R2ET regularizer, curvature baselines, ERAttack/MSE/MOO attacks and faithfulness metrics."

REQUIREMENT_FILE_NAME = "requirements.txt"

HYPHEN_E_DOT = "-e ."


def get_requirements_list() -> List[str]:
    """
    Description: This function is going to return list of requirement
    mention in requirements.txt file
    return This function is going to return a list which contain name
    of libraries mentioned in requirements.txt file
    """
    with open(REQUIREMENT_FILE_NAME) as requirement_file:
        requirement_list = requirement_file.readlines()
        requirement_list = [requirement_name.strip() for requirement_name in requirement_list]
        requirement_list = [name for name in requirement_list if name and not name.startswith("#")]
        if HYPHEN_E_DOT in requirement_list:
            requirement_list.remove(HYPHEN_E_DOT)
        return requirement_list


setup(
    name=PROJECT_NAME,
    version=VERSION,
    author=AUTHOR,
    description=DESRCIPTION,
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=get_requirements_list(),
    python_requires=">=3.9",
    entry_points={"console_scripts": ["rankshield=src.cli:entrypoint"]},
)
