"""The reverse-mode engine underneath the graph network: record a small
computation, backprop it, cross-check against finite differences, and fit a
toy regression with Adam.

Run: python demos/03_autodiff_basics.py
"""
import numpy as np

from flowsage import AdamState, Tensor, adam_step, backward, zero_grads
from flowsage.autodiff import matmul, relu, segment_mean, tensor_mean

rng = np.random.default_rng(0)

# --- a hand-checkable gradient -------------------------------------------
w = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64), requires_grad=True)
x = Tensor(np.array([[0.5], [-1.0]], dtype=np.float64))
loss = tensor_mean(relu(matmul(w, x)))
backward(loss)
print("loss:", loss.item())
print("analytic dL/dW:\n", w.grad)

eps = 1e-6
fd = np.zeros_like(w.data)
for i in range(2):
    for j in range(2):
        w.data[i, j] += eps
        up = tensor_mean(relu(matmul(w, x))).item()
        w.data[i, j] -= 2 * eps
        down = tensor_mean(relu(matmul(w, x))).item()
        w.data[i, j] += eps
        fd[i, j] = (up - down) / (2 * eps)
print("finite differences agree:", np.allclose(w.grad, fd, atol=1e-8))

# --- segment_mean is the aggregation primitive of the GNN ------------------
vals = Tensor(np.array([[2.0], [4.0], [6.0]]))
print("\nsegment_mean([[2],[4],[6]], ids=[0,0,1], 3 segments) ->",
      segment_mean(vals, [0, 0, 1], 3).data.ravel(), "(empty segment is 0)")

# --- Adam on least squares --------------------------------------------------
true_w = rng.normal(size=(5, 1))
X = rng.normal(size=(64, 5)).astype(np.float32)
y = X @ true_w.astype(np.float32)
w_fit = {"w": Tensor(np.zeros((5, 1), dtype=np.float32), requires_grad=True)}
state = AdamState.for_params(w_fit, lr=0.05)
for step in range(200):
    err = matmul(Tensor(X), w_fit["w"]) + Tensor(-y)
    loss = tensor_mean(err * err)
    zero_grads(w_fit)
    backward(loss)
    adam_step(w_fit, state)
    if step % 50 == 0:
        print(f"step {step:3d}  mse {loss.item():.5f}")
print("recovered weights close to truth:",
      np.allclose(w_fit['w'].data, true_w, atol=1e-2))
