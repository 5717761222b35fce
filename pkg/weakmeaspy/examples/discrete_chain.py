"""Example 1: a projective qubit measurement as a chain of weak measurements, cross-checked on the operators"""
import numpy as np

from weakmeaspy import QuantumState, build_weak_set, collapse_states, fidelity, projective_basis, \
    propagate_state, reconstruct_state, run_chain, trajectory_rng

psi0 = QuantumState.pure([np.sqrt(0.7), np.sqrt(0.3)])
projectors = projective_basis(2)
weak_set = build_weak_set(projectors, strength=0.2)
collapse, p0 = collapse_states(psi0, projectors)

""" One chain, seeded like trajectory 0 of an ensemble with master seed 2024 """
chain = run_chain(psi0, weak_set, eps_stop=1e-3, rng=trajectory_rng(2024, 0), seed=2024, index=0)
print(f"p0 = {p0.components.tolist()}")
print(f"{chain.steps_taken} weak outcomes, collapsed onto outcome {chain.terminal_outcome}")
print(f"first outcomes: {list(chain.outcomes[:20])}")

""" The classical coordinate alone determines the state reached by the operator path """
states = propagate_state(psi0, weak_set, chain.outcomes)
worst = min(fidelity(state, reconstruct_state(x, p0, collapse)) for state, x in zip(states, chain.points))
print(f"lowest fidelity between propagated and reconstructed states: {worst:.12f}")
