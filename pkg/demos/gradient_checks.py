"""Verify every training loss against central finite differences.

Run ``python demos/gradient_checks.py``.  The second pass corrupts one
analytic gradient entry per case to show that the checker notices.
"""
from gfca import gradcheck as gc

print("analytic vs numeric gradients, 5 seeds per loss")
print(gc.format_results(gc.run_suite("all", seeds=range(5))))

print("\nsame suite with one gradient entry scaled by 1.1")
faulty = gc.run_suite("all", seeds=range(1), fault=True)
print(f"{sum(not r.passed for r in faulty)} of {len(faulty)} cases flagged")
