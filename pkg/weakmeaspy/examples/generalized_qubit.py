"""Example 2: the unsharp qubit measurement realized by the simplex diffusion and the measurement map"""
import numpy as np

from weakmeaspy import MeasurementMap, QuantumState, SdeConfig, identity, measurement_map, run_generalized, \
    trajectory_rng, unsharp_qubit, vertex

kraus = unsharp_qubit(0.3)
mmap = MeasurementMap(kraus)
psi0 = QuantumState.pure([1, 1], normalize=True)
cfg = SdeConfig(dt=1e-3, eps_stop=1e-3, record_every=50)

""" The map is the identity at e and the Kraus operator at each vertex """
print(f"M(e) = \n{np.round(measurement_map(identity(2), mmap), 6)}")
for k in range(kraus.n):
    error = np.abs(measurement_map(vertex(2, k), mmap) - kraus[k]).max()
    print(f"|M(v_{k}) - M_{k}| = {error:.2e}")

counts = np.zeros(kraus.n, dtype=int)
for i in range(200):
    outcome = run_generalized(psi0, kraus, cfg, trajectory_rng(7, i), mmap=mmap, seed=7, index=i)
    if outcome.terminated:
        counts[outcome.terminal_index] += 1
    if i < 5:
        print(f"trajectory {i}: outcome {outcome.terminal_index} at t = {outcome.trajectory.final_time:.3f}, "
              f"fidelity {outcome.fidelity_to_target:.6f}")
print(f"terminal frequencies {counts / counts.sum()} against p0 {kraus.born_probabilities(psi0)}")
