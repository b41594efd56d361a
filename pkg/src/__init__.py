"""DC-NAS — divide-and-conquer neural architecture search toolkit.

Top-level package: a numpy network engine, search spaces, trajectory
clustering, champion selection and the experiment harness.
"""
