"""
How attention cost grows with the number of tokens
==================================================

Token self-attention forms an N x N map; cross-covariance attention forms a
d x d one. Doubling N should roughly quadruple the first and double the
second. Timings are machine-dependent; the log-log slopes are what matter.
"""

from pef.bench import bench_attention_scaling

result = bench_attention_scaling([256, 512, 1024, 2048, 4096], d=64, repetitions=5)
print(result.table())
for mech, ratios in result.ratios().items():
    print(mech, "time(2N)/time(N):", " ".join(f"{r:.2f}" for r in ratios))
print(result.summary())
