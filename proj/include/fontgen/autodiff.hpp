#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fontgen/common.hpp"
#include "fontgen/tensor.hpp"

namespace fontgen::ad {

// Reverse-mode tape over eager tensor ops. Each op computes its value
// immediately and records a closure that scatters the output gradient into
// its parents. Nodes whose ancestors carry no trainable parameter drop their
// parent links, so inference-only forwards build no tape.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;
  bool requires_grad = false;

  Tensor& ensure_grad() {
    if (grad.numel() == 0) grad = Tensor(value.shape());
    return grad;
  }
};

using VarPtr = std::shared_ptr<Node>;

inline VarPtr constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

inline VarPtr parameter(Tensor t) {
  auto n = constant(std::move(t));
  n->requires_grad = true;
  return n;
}

inline VarPtr detach(const VarPtr& v) { return constant(v->value); }

inline VarPtr make_op(Tensor value, std::vector<VarPtr> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(back);
  }
  return n;
}

// Backpropagate from a scalar root through the recorded tape.
inline void backward(const VarPtr& root) {
  if (!root->requires_grad) return;
  if (root->value.numel() != 1) throw ShapeError("backward: root must be scalar");

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.push_back({root.get(), 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    // An unallocated grad means no consumer contributed anything, i.e. the
    // incoming gradient is identically zero, so the node has nothing to pass on.
    if (n->backprop && n->grad.numel() != 0) n->backprop(*n);
  }
}

inline void zero_grad(const std::vector<VarPtr>& params) {
  for (const auto& p : params)
    if (p->grad.numel() != 0) p->grad.zero();
}

// ---------------------------------------------------------------------------
// Elementwise ops

inline void check_same_shape(const VarPtr& a, const VarPtr& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_string() + " vs " +
                     b->value.shape_string());
}

inline VarPtr add(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, n](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
  });
}

inline VarPtr sub(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, n](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
    }
  });
}

inline VarPtr mul(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, n](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bp->value[i];
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * ap->value[i];
    }
  });
}

// out = k*x + c
inline VarPtr affine(const VarPtr& x, real k, real c) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = k * x->value[i] + c;
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, k, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += k * self.grad[i];
  });
}

inline VarPtr scale(const VarPtr& x, real k) { return affine(x, k, 0.0); }
inline VarPtr add_scalar(const VarPtr& x, real c) { return affine(x, 1.0, c); }
inline VarPtr neg(const VarPtr& x) { return affine(x, -1.0, 0.0); }
// out = c - x
inline VarPtr rsub_scalar(real c, const VarPtr& x) { return affine(x, -1.0, c); }

inline VarPtr abs_(const VarPtr& x) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::fabs(x->value[i]);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const real v = xp->value[i];
      g[i] += self.grad[i] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
    }
  });
}

inline VarPtr log_(const VarPtr& x) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::log(x->value[i]);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] / xp->value[i];
  });
}

inline VarPtr exp_(const VarPtr& x) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x->value[i]);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * self.value[i];
  });
}

inline VarPtr clamp(const VarPtr& x, real lo, real hi) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, x->value[i]));
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, lo, hi, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const real v = xp->value[i];
      if (v > lo && v < hi) g[i] += self.grad[i];
    }
  });
}

inline VarPtr leaky_relu(const VarPtr& x, real slope = 0.2) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const real v = x->value[i];
    out[i] = v > 0 ? v : slope * v;
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, slope, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * (xp->value[i] > 0 ? 1.0 : slope);
  });
}

inline VarPtr sigmoid(const VarPtr& x) {
  Tensor out(x->value.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-x->value[i]));
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const real s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape ops

inline VarPtr reshape(const VarPtr& x, std::vector<int> shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  Node* xp = x.get();
  const std::size_t n = out.numel();
  return make_op(std::move(out), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

inline VarPtr concat_channels(const std::vector<VarPtr>& xs) {
  if (xs.empty()) throw ArgumentError("concat_channels: empty input");
  const int N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
  int C = 0;
  for (const auto& x : xs) {
    if (x->value.rank() != 4 || x->value.dim(0) != N || x->value.dim(2) != H || x->value.dim(3) != W)
      throw ShapeError("concat_channels: incompatible shapes");
    C += x->value.dim(1);
  }
  Tensor out({N, C, H, W});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const int ci = x->value.dim(1);
    for (int n = 0; n < N; ++n)
      std::copy_n(x->value.data() + static_cast<std::size_t>(n) * ci * plane, static_cast<std::size_t>(ci) * plane,
                  out.data() + (static_cast<std::size_t>(n) * C + off) * plane);
    off += ci;
  }
  std::vector<Node*> raw;
  for (const auto& x : xs) raw.push_back(x.get());
  return make_op(std::move(out), xs, [raw, offsets, N, C, H, W](Node& self) {
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      Node* xp = raw[k];
      if (!xp->requires_grad) continue;
      Tensor& g = xp->ensure_grad();
      const int ci = xp->value.dim(1);
      for (int n = 0; n < N; ++n) {
        const real* src = self.grad.data() + (static_cast<std::size_t>(n) * C + offsets[k]) * plane;
        real* dst = g.data() + static_cast<std::size_t>(n) * ci * plane;
        for (std::size_t i = 0; i < static_cast<std::size_t>(ci) * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

// Concatenate 2-D matrices [N,p] and [N,q] along columns.
inline VarPtr concat_cols(const VarPtr& a, const VarPtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(0) != b->value.dim(0))
    throw ShapeError("concat_cols: need matrices with equal row count");
  const int N = a->value.dim(0), P = a->value.dim(1), Q = b->value.dim(1);
  Tensor out({N, P + Q});
  for (int n = 0; n < N; ++n) {
    for (int j = 0; j < P; ++j) out.at2(n, j) = a->value.at2(n, j);
    for (int j = 0; j < Q; ++j) out.at2(n, P + j) = b->value.at2(n, j);
  }
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, N, P, Q](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < P; ++j) g.at2(n, j) += self.grad.at2(n, j);
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < Q; ++j) g.at2(n, j) += self.grad.at2(n, P + j);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline VarPtr sum_all(const VarPtr& x) {
  real s = 0;
  const std::size_t n = x->value.numel();
  for (std::size_t i = 0; i < n; ++i) s += x->value[i];
  Node* xp = x.get();
  return make_op(Tensor::scalar(s), {x}, [xp, n](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    const real gv = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) g[i] += gv;
  });
}

inline VarPtr mean_all(const VarPtr& x) { return scale(sum_all(x), 1.0 / static_cast<real>(x->value.numel())); }

// Mean over all dims but the first: [N,...] -> [N].
inline VarPtr mean_per_sample(const VarPtr& x) {
  const int N = x->value.dim(0);
  const std::size_t per = x->value.numel() / static_cast<std::size_t>(N);
  Tensor out({N});
  for (int n = 0; n < N; ++n) {
    real s = 0;
    const real* p = x->value.data() + n * per;
    for (std::size_t i = 0; i < per; ++i) s += p[i];
    out[n] = s / static_cast<real>(per);
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, N, per](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int n = 0; n < N; ++n) {
      const real gv = self.grad[n] / static_cast<real>(per);
      real* p = g.data() + n * per;
      for (std::size_t i = 0; i < per; ++i) p[i] += gv;
    }
  });
}

// Fixed-weight contraction of a vector [N] -> scalar; weights are data.
inline VarPtr weighted_sum_const(const VarPtr& x, std::vector<real> w) {
  if (x->value.rank() != 1 || static_cast<std::size_t>(x->value.dim(0)) != w.size())
    throw ShapeError("weighted_sum_const: weight/vector size mismatch");
  real s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x->value[i];
  Node* xp = x.get();
  return make_op(Tensor::scalar(s), {x}, [xp, w = std::move(w)](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// Stack scalar nodes into a vector [K].
inline VarPtr stack_scalars(const std::vector<VarPtr>& xs) {
  Tensor out({static_cast<int>(xs.size())});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->value.numel() != 1) throw ShapeError("stack_scalars: inputs must be scalar");
    out[i] = xs[i]->value[0];
  }
  std::vector<Node*> raw;
  for (const auto& x : xs) raw.push_back(x.get());
  return make_op(std::move(out), xs, [raw](Node& self) {
    for (std::size_t i = 0; i < raw.size(); ++i)
      if (raw[i]->requires_grad) raw[i]->ensure_grad()[0] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix ops

inline VarPtr matmul(const VarPtr& a, const VarPtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
    throw ShapeError("matmul: incompatible shapes " + a->value.shape_string() + " x " + b->value.shape_string());
  const int N = a->value.dim(0), K = a->value.dim(1), M = b->value.dim(1);
  Tensor out({N, M});
  for (int i = 0; i < N; ++i) {
    real* orow = out.data() + static_cast<std::size_t>(i) * M;
    const real* arow = a->value.data() + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const real av = arow[k];
      const real* brow = b->value.data() + static_cast<std::size_t>(k) * M;
      for (int j = 0; j < M; ++j) orow[j] += av * brow[j];
    }
  }
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, N, K, M](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int k = 0; k < K; ++k) {
          real s = 0;
          const real* grow = self.grad.data() + static_cast<std::size_t>(i) * M;
          const real* brow = bp->value.data() + static_cast<std::size_t>(k) * M;
          for (int j = 0; j < M; ++j) s += grow[j] * brow[j];
          g.at2(i, k) += s;
        }
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int k = 0; k < K; ++k)
        for (int i = 0; i < N; ++i) {
          const real av = ap->value.at2(i, k);
          const real* grow = self.grad.data() + static_cast<std::size_t>(i) * M;
          real* grow_b = g.data() + static_cast<std::size_t>(k) * M;
          for (int j = 0; j < M; ++j) grow_b[j] += av * grow[j];
        }
    }
  });
}

// A [p,k] times B^T for B [q,k] -> [p,q].
inline VarPtr matmul_nt(const VarPtr& a, const VarPtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(1))
    throw ShapeError("matmul_nt: incompatible shapes");
  const int P = a->value.dim(0), K = a->value.dim(1), Q = b->value.dim(0);
  Tensor out({P, Q});
  for (int i = 0; i < P; ++i)
    for (int j = 0; j < Q; ++j) {
      real s = 0;
      const real* arow = a->value.data() + static_cast<std::size_t>(i) * K;
      const real* brow = b->value.data() + static_cast<std::size_t>(j) * K;
      for (int k = 0; k < K; ++k) s += arow[k] * brow[k];
      out.at2(i, j) = s;
    }
  Node* ap = a.get();
  Node* bp = b.get();
  return make_op(std::move(out), {a, b}, [ap, bp, P, K, Q](Node& self) {
    if (ap->requires_grad) {
      Tensor& g = ap->ensure_grad();
      for (int i = 0; i < P; ++i)
        for (int j = 0; j < Q; ++j) {
          const real gv = self.grad.at2(i, j);
          real* grow = g.data() + static_cast<std::size_t>(i) * K;
          const real* brow = bp->value.data() + static_cast<std::size_t>(j) * K;
          for (int k = 0; k < K; ++k) grow[k] += gv * brow[k];
        }
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int j = 0; j < Q; ++j)
        for (int i = 0; i < P; ++i) {
          const real gv = self.grad.at2(i, j);
          real* grow = g.data() + static_cast<std::size_t>(j) * K;
          const real* arow = ap->value.data() + static_cast<std::size_t>(i) * K;
          for (int k = 0; k < K; ++k) grow[k] += gv * arow[k];
        }
    }
  });
}

// x [N,k] W [k,m] + b [m]; b may be null.
inline VarPtr linear(const VarPtr& x, const VarPtr& w, const VarPtr& b) {
  VarPtr y = matmul(x, w);
  if (!b) return y;
  if (b->value.rank() != 1 || b->value.dim(0) != y->value.dim(1)) throw ShapeError("linear: bias shape");
  const int N = y->value.dim(0), M = y->value.dim(1);
  Tensor out(y->value.shape());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < M; ++j) out.at2(i, j) = y->value.at2(i, j) + b->value[j];
  Node* yp = y.get();
  Node* bp = b.get();
  return make_op(std::move(out), {y, b}, [yp, bp, N, M](Node& self) {
    if (yp->requires_grad) {
      Tensor& g = yp->ensure_grad();
      for (std::size_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }
    if (bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < M; ++j) g[j] += self.grad.at2(i, j);
    }
  });
}

// Rows of x [N,d] scaled to unit L2 norm; eps added to the norm before
// division so an all-zero row stays zero instead of producing NaN.
inline VarPtr l2_normalize_rows(const VarPtr& x, real eps = 1e-12) {
  if (x->value.rank() != 2) throw ShapeError("l2_normalize_rows: need matrix");
  const int N = x->value.dim(0), D = x->value.dim(1);
  Tensor out({N, D});
  std::vector<real> norms(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    real s = 0;
    for (int j = 0; j < D; ++j) s += x->value.at2(i, j) * x->value.at2(i, j);
    norms[i] = std::sqrt(s);
    const real r = 1.0 / (norms[i] + eps);
    for (int j = 0; j < D; ++j) out.at2(i, j) = x->value.at2(i, j) * r;
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, norms = std::move(norms), eps, N, D](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int i = 0; i < N; ++i) {
      const real nrm = norms[i];
      const real r = 1.0 / (nrm + eps);
      real dot = 0;
      for (int j = 0; j < D; ++j) dot += self.grad.at2(i, j) * xp->value.at2(i, j);
      const real coef = nrm > 0 ? dot / (nrm * (nrm + eps) * (nrm + eps)) : 0.0;
      for (int j = 0; j < D; ++j) g.at2(i, j) += self.grad.at2(i, j) * r - coef * xp->value.at2(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW)

namespace detail {
// Output index range [lo,hi] such that 0 <= o*stride + off < extent; hi < lo
// encodes an empty range (plain division would round -1/stride up to 0).
inline void conv_bounds(int off, int stride, int extent, int out_extent, int& lo, int& hi) {
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int top = extent - 1 - off;
  hi = top < 0 ? -1 : top / stride;
  if (hi > out_extent - 1) hi = out_extent - 1;
}
}  // namespace detail

inline VarPtr conv2d(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4) throw ShapeError("conv2d: need 4-D input and weight");
  const int N = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Co = w->value.dim(0), KH = w->value.dim(2), KW = w->value.dim(3);
  if (w->value.dim(1) != Ci) throw ShapeError("conv2d: channel mismatch");
  const int Ho = (H + 2 * pad - KH) / stride + 1;
  const int Wo = (W + 2 * pad - KW) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: output collapses");
  Tensor out({N, Co, Ho, Wo});
  if (b) {
    if (b->value.rank() != 1 || b->value.dim(0) != Co) throw ShapeError("conv2d: bias shape");
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        real* plane = out.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho) * Wo;
        const real bv = b->value[co];
        for (int i = 0; i < Ho * Wo; ++i) plane[i] = bv;
      }
  }
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Co; ++co)
      for (int ci = 0; ci < Ci; ++ci)
        for (int kh = 0; kh < KH; ++kh) {
          int ho_lo, ho_hi;
          detail::conv_bounds(kh - pad, stride, H, Ho, ho_lo, ho_hi);
          for (int kw = 0; kw < KW; ++kw) {
            const real wv = w->value.at4(co, ci, kh, kw);
            if (wv == 0.0) continue;
            int wo_lo, wo_hi;
            detail::conv_bounds(kw - pad, stride, W, Wo, wo_lo, wo_hi);
            for (int ho = ho_lo; ho <= ho_hi; ++ho) {
              const int hi = ho * stride + kh - pad;
              const real* xrow = x->value.data() + ((static_cast<std::size_t>(n) * Ci + ci) * H + hi) * W;
              real* orow = out.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho + ho) * Wo;
              for (int wo = wo_lo; wo <= wo_hi; ++wo) orow[wo] += wv * xrow[wo * stride + kw - pad];
            }
          }
        }
  Node* xp = x.get();
  Node* wp = w.get();
  Node* bp = b ? b.get() : nullptr;
  std::vector<VarPtr> parents{x, w};
  if (b) parents.push_back(b);
  return make_op(std::move(out), std::move(parents), [=](Node& self) {
    if (bp && bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const real* plane = self.grad.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho) * Wo;
          real s = 0;
          for (int i = 0; i < Ho * Wo; ++i) s += plane[i];
          g[co] += s;
        }
    }
    const bool need_x = xp->requires_grad, need_w = wp->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) xp->ensure_grad();
    if (need_w) wp->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci)
          for (int kh = 0; kh < KH; ++kh) {
            int ho_lo, ho_hi;
            detail::conv_bounds(kh - pad, stride, H, Ho, ho_lo, ho_hi);
            for (int kw = 0; kw < KW; ++kw) {
              const real wv = wp->value.at4(co, ci, kh, kw);
              real dw = 0;
              int wo_lo, wo_hi;
              detail::conv_bounds(kw - pad, stride, W, Wo, wo_lo, wo_hi);
              for (int ho = ho_lo; ho <= ho_hi; ++ho) {
                const int hi = ho * stride + kh - pad;
                const real* grow = self.grad.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho + ho) * Wo;
                const real* xrow = xp->value.data() + ((static_cast<std::size_t>(n) * Ci + ci) * H + hi) * W;
                real* dxrow = need_x ? xp->grad.data() + ((static_cast<std::size_t>(n) * Ci + ci) * H + hi) * W : nullptr;
                for (int wo = wo_lo; wo <= wo_hi; ++wo) {
                  const int wi = wo * stride + kw - pad;
                  const real gv = grow[wo];
                  if (need_x) dxrow[wi] += wv * gv;
                  dw += xrow[wi] * gv;
                }
              }
              if (need_w) wp->grad.at4(co, ci, kh, kw) += dw;
            }
          }
  });
}

// Transposed convolution; weight layout [Ci,Co,KH,KW].
// Output spatial extent: (in-1)*stride - 2*pad + kernel.
inline VarPtr conv2d_transpose(const VarPtr& x, const VarPtr& w, const VarPtr& b, int stride, int pad) {
  if (x->value.rank() != 4 || w->value.rank() != 4) throw ShapeError("conv2d_transpose: need 4-D input and weight");
  const int N = x->value.dim(0), Ci = x->value.dim(1), Hi = x->value.dim(2), Wi = x->value.dim(3);
  if (w->value.dim(0) != Ci) throw ShapeError("conv2d_transpose: channel mismatch");
  const int Co = w->value.dim(1), KH = w->value.dim(2), KW = w->value.dim(3);
  const int Ho = (Hi - 1) * stride - 2 * pad + KH;
  const int Wo = (Wi - 1) * stride - 2 * pad + KW;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d_transpose: output collapses");
  Tensor out({N, Co, Ho, Wo});
  if (b) {
    if (b->value.rank() != 1 || b->value.dim(0) != Co) throw ShapeError("conv2d_transpose: bias shape");
    for (int n = 0; n < N; ++n)
      for (int co = 0; co < Co; ++co) {
        real* plane = out.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho) * Wo;
        const real bv = b->value[co];
        for (int i = 0; i < Ho * Wo; ++i) plane[i] = bv;
      }
  }
  for (int n = 0; n < N; ++n)
    for (int ci = 0; ci < Ci; ++ci)
      for (int co = 0; co < Co; ++co)
        for (int kh = 0; kh < KH; ++kh) {
          int hi_lo, hi_hi;
          detail::conv_bounds(kh - pad, stride, Ho, Hi, hi_lo, hi_hi);
          for (int kw = 0; kw < KW; ++kw) {
            const real wv = w->value.at4(ci, co, kh, kw);
            if (wv == 0.0) continue;
            int wi_lo, wi_hi;
            detail::conv_bounds(kw - pad, stride, Wo, Wi, wi_lo, wi_hi);
            for (int hi = hi_lo; hi <= hi_hi; ++hi) {
              const int ho = hi * stride + kh - pad;
              const real* xrow = x->value.data() + ((static_cast<std::size_t>(n) * Ci + ci) * Hi + hi) * Wi;
              real* orow = out.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho + ho) * Wo;
              for (int wi = wi_lo; wi <= wi_hi; ++wi) orow[wi * stride + kw - pad] += wv * xrow[wi];
            }
          }
        }
  Node* xp = x.get();
  Node* wp = w.get();
  Node* bp = b ? b.get() : nullptr;
  std::vector<VarPtr> parents{x, w};
  if (b) parents.push_back(b);
  return make_op(std::move(out), std::move(parents), [=](Node& self) {
    if (bp && bp->requires_grad) {
      Tensor& g = bp->ensure_grad();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const real* plane = self.grad.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho) * Wo;
          real s = 0;
          for (int i = 0; i < Ho * Wo; ++i) s += plane[i];
          g[co] += s;
        }
    }
    const bool need_x = xp->requires_grad, need_w = wp->requires_grad;
    if (!need_x && !need_w) return;
    if (need_x) xp->ensure_grad();
    if (need_w) wp->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int ci = 0; ci < Ci; ++ci)
        for (int co = 0; co < Co; ++co)
          for (int kh = 0; kh < KH; ++kh) {
            int hi_lo, hi_hi;
            detail::conv_bounds(kh - pad, stride, Ho, Hi, hi_lo, hi_hi);
            for (int kw = 0; kw < KW; ++kw) {
              const real wv = wp->value.at4(ci, co, kh, kw);
              real dw = 0;
              int wi_lo, wi_hi;
              detail::conv_bounds(kw - pad, stride, Wo, Wi, wi_lo, wi_hi);
              for (int hi = hi_lo; hi <= hi_hi; ++hi) {
                const int ho = hi * stride + kh - pad;
                const real* grow = self.grad.data() + ((static_cast<std::size_t>(n) * Co + co) * Ho + ho) * Wo;
                const real* xrow = xp->value.data() + ((static_cast<std::size_t>(n) * Ci + ci) * Hi + hi) * Wi;
                real* dxrow = need_x ? xp->grad.data() + ((static_cast<std::size_t>(n) * Ci + ci) * Hi + hi) * Wi : nullptr;
                for (int wi = wi_lo; wi <= wi_hi; ++wi) {
                  const real gv = grow[wi * stride + kw - pad];
                  if (need_x) dxrow[wi] += wv * gv;
                  dw += xrow[wi] * gv;
                }
              }
              if (need_w) wp->grad.at4(ci, co, kh, kw) += dw;
            }
          }
  });
}

// Per-instance, per-channel normalization with affine parameters.
inline VarPtr instance_norm(const VarPtr& x, const VarPtr& gamma, const VarPtr& beta, real eps = 1e-5) {
  if (x->value.rank() != 4) throw ShapeError("instance_norm: need 4-D input");
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (gamma->value.dim(0) != C || beta->value.dim(0) != C) throw ShapeError("instance_norm: affine shape");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor out({N, C, H, W});
  Tensor xhat({N, C, H, W});
  std::vector<real> inv_std(static_cast<std::size_t>(N) * C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const real* p = x->value.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      real m = 0;
      for (std::size_t i = 0; i < plane; ++i) m += p[i];
      m /= static_cast<real>(plane);
      real v = 0;
      for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      v /= static_cast<real>(plane);
      const real is = 1.0 / std::sqrt(v + eps);
      inv_std[static_cast<std::size_t>(n) * C + c] = is;
      real* xh = xhat.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      real* o = out.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      const real gc = gamma->value[c], bc = beta->value[c];
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - m) * is;
        o[i] = gc * xh[i] + bc;
      }
    }
  Node* xp = x.get();
  Node* gp = gamma.get();
  Node* bp = beta.get();
  return make_op(std::move(out), {x, gamma, beta},
                 [xp, gp, bp, xhat = std::move(xhat), inv_std = std::move(inv_std), N, C, plane](Node& self) {
                   for (int n = 0; n < N; ++n)
                     for (int c = 0; c < C; ++c) {
                       const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                       const real* go = self.grad.data() + base;
                       const real* xh = xhat.data() + base;
                       if (gp->requires_grad) {
                         real s = 0;
                         for (std::size_t i = 0; i < plane; ++i) s += go[i] * xh[i];
                         gp->ensure_grad()[c] += s;
                       }
                       if (bp->requires_grad) {
                         real s = 0;
                         for (std::size_t i = 0; i < plane; ++i) s += go[i];
                         bp->ensure_grad()[c] += s;
                       }
                       if (xp->requires_grad) {
                         const real gc = gp->value[c];
                         const real is = inv_std[static_cast<std::size_t>(n) * C + c];
                         real mean_g = 0, mean_gx = 0;
                         for (std::size_t i = 0; i < plane; ++i) {
                           mean_g += go[i];
                           mean_gx += go[i] * xh[i];
                         }
                         mean_g /= static_cast<real>(plane);
                         mean_gx /= static_cast<real>(plane);
                         real* gx = xp->ensure_grad().data() + base;
                         for (std::size_t i = 0; i < plane; ++i)
                           gx[i] += gc * is * (go[i] - mean_g - xh[i] * mean_gx);
                       }
                     }
                 });
}

// Non-overlapping average pooling; spatial dims must divide by k.
inline VarPtr avg_pool(const VarPtr& x, int k) {
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (k == 1) return x;
  if (H % k != 0 || W % k != 0) throw ShapeError("avg_pool: extent not divisible");
  const int Ho = H / k, Wo = W / k;
  Tensor out({N, C, Ho, Wo});
  const real inv = 1.0 / static_cast<real>(k * k);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int ho = 0; ho < Ho; ++ho)
        for (int wo = 0; wo < Wo; ++wo) {
          real s = 0;
          for (int dh = 0; dh < k; ++dh)
            for (int dw = 0; dw < k; ++dw) s += x->value.at4(n, c, ho * k + dh, wo * k + dw);
          out.at4(n, c, ho, wo) = s * inv;
        }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, N, C, Ho, Wo, k, inv](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int ho = 0; ho < Ho; ++ho)
          for (int wo = 0; wo < Wo; ++wo) {
            const real gv = self.grad.at4(n, c, ho, wo) * inv;
            for (int dh = 0; dh < k; ++dh)
              for (int dw = 0; dw < k; ++dw) g.at4(n, c, ho * k + dh, wo * k + dw) += gv;
          }
  });
}

// ---------------------------------------------------------------------------
// Patches and blur

struct PatchSpot {
  int sample;
  int top;
  int left;
};

inline VarPtr extract_patches(const VarPtr& x, const std::vector<PatchSpot>& spots, int size) {
  const int C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  for (const auto& s : spots)
    if (s.sample < 0 || s.sample >= x->value.dim(0) || s.top < 0 || s.left < 0 || s.top + size > H ||
        s.left + size > W)
      throw ShapeError("extract_patches: patch out of bounds");
  Tensor out({static_cast<int>(spots.size()), C, size, size});
  for (std::size_t p = 0; p < spots.size(); ++p)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j)
          out.at4(static_cast<int>(p), c, i, j) = x->value.at4(spots[p].sample, c, spots[p].top + i, spots[p].left + j);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, spots, size, C](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t p = 0; p < spots.size(); ++p)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < size; ++i)
          for (int j = 0; j < size; ++j)
            g.at4(spots[p].sample, c, spots[p].top + i, spots[p].left + j) +=
                self.grad.at4(static_cast<int>(p), c, i, j);
  });
}

// 3x3 Gaussian blur, sigma 1.0. Border taps renormalize over in-bounds
// weights, so constant images are fixed points.
inline VarPtr gaussian_blur3(const VarPtr& x) {
  static const real kKernel[3][3] = {
      {std::exp(-1.0), std::exp(-0.5), std::exp(-1.0)},
      {std::exp(-0.5), 1.0, std::exp(-0.5)},
      {std::exp(-1.0), std::exp(-0.5), std::exp(-1.0)},
  };
  const int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  Tensor out({N, C, H, W});
  auto apply = [&](const Tensor& src, Tensor& dst, bool transpose_grad) {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            real acc = 0, norm = 0;
            for (int dh = -1; dh <= 1; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                const int hh = h + dh, ww = w + dw;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                const real kv = kKernel[dh + 1][dw + 1];
                norm += kv;
                if (!transpose_grad) acc += kv * src.at4(n, c, hh, ww);
              }
            if (!transpose_grad) dst.at4(n, c, h, w) = acc / norm;
          }
  };
  apply(x->value, out, false);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, N, C, H, W](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    // dx[src] += sum over outputs that read src, each divided by that
    // output's own border normalization.
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w) {
            real norm = 0;
            for (int dh = -1; dh <= 1; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                const int hh = h + dh, ww = w + dw;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                norm += kKernel[dh + 1][dw + 1];
              }
            const real gv = self.grad.at4(n, c, h, w) / norm;
            for (int dh = -1; dh <= 1; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                const int hh = h + dh, ww = w + dw;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                g.at4(n, c, hh, ww) += gv * kKernel[dh + 1][dw + 1];
              }
          }
  });
}

// ---------------------------------------------------------------------------
// Row/column reductions and broadcasts on matrices (used by the contextual
// similarity pipeline)

inline VarPtr row_min(const VarPtr& x) {
  const int P = x->value.dim(0), Q = x->value.dim(1);
  Tensor out({P, 1});
  std::vector<int> arg(static_cast<std::size_t>(P));
  for (int i = 0; i < P; ++i) {
    int best = 0;
    for (int j = 1; j < Q; ++j)
      if (x->value.at2(i, j) < x->value.at2(i, best)) best = j;
    arg[i] = best;
    out.at2(i, 0) = x->value.at2(i, best);
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, arg = std::move(arg), P](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int i = 0; i < P; ++i) g.at2(i, arg[i]) += self.grad.at2(i, 0);
  });
}

inline VarPtr row_sum(const VarPtr& x) {
  const int P = x->value.dim(0), Q = x->value.dim(1);
  Tensor out({P, 1});
  for (int i = 0; i < P; ++i) {
    real s = 0;
    for (int j = 0; j < Q; ++j) s += x->value.at2(i, j);
    out.at2(i, 0) = s;
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, P, Q](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int i = 0; i < P; ++i) {
      const real gv = self.grad.at2(i, 0);
      for (int j = 0; j < Q; ++j) g.at2(i, j) += gv;
    }
  });
}

inline VarPtr col_max(const VarPtr& x) {
  const int P = x->value.dim(0), Q = x->value.dim(1);
  Tensor out({1, Q});
  std::vector<int> arg(static_cast<std::size_t>(Q));
  for (int j = 0; j < Q; ++j) {
    int best = 0;
    for (int i = 1; i < P; ++i)
      if (x->value.at2(i, j) > x->value.at2(best, j)) best = i;
    arg[j] = best;
    out.at2(0, j) = x->value.at2(best, j);
  }
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, arg = std::move(arg), Q](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int j = 0; j < Q; ++j) g.at2(arg[j], j) += self.grad.at2(0, j);
  });
}

// x [P,Q] divided row-wise by v [P,1].
inline VarPtr div_rowwise(const VarPtr& x, const VarPtr& v) {
  const int P = x->value.dim(0), Q = x->value.dim(1);
  if (v->value.dim(0) != P || v->value.dim(1) != 1) throw ShapeError("div_rowwise: divisor shape");
  Tensor out({P, Q});
  for (int i = 0; i < P; ++i) {
    const real r = 1.0 / v->value.at2(i, 0);
    for (int j = 0; j < Q; ++j) out.at2(i, j) = x->value.at2(i, j) * r;
  }
  Node* xp = x.get();
  Node* vp = v.get();
  return make_op(std::move(out), {x, v}, [xp, vp, P, Q](Node& self) {
    for (int i = 0; i < P; ++i) {
      const real vv = vp->value.at2(i, 0);
      const real r = 1.0 / vv;
      if (xp->requires_grad) {
        Tensor& g = xp->ensure_grad();
        for (int j = 0; j < Q; ++j) g.at2(i, j) += self.grad.at2(i, j) * r;
      }
      if (vp->requires_grad) {
        real s = 0;
        for (int j = 0; j < Q; ++j) s += self.grad.at2(i, j) * xp->value.at2(i, j);
        vp->ensure_grad().at2(i, 0) += -s * r * r;
      }
    }
  });
}

// Slice one sample of a 4-D feature map into a [H*W, C] feature matrix.
// Gather whole samples along the leading axis of an [N,...] tensor.
inline VarPtr select_samples(const VarPtr& x, const std::vector<int>& indices) {
  if (x->value.rank() < 1) throw ShapeError("select_samples: need a leading sample axis");
  if (indices.empty()) throw ShapeError("select_samples: empty selection");
  const int N = x->value.dim(0);
  const std::size_t item = x->value.numel() / static_cast<std::size_t>(N);
  for (int i : indices)
    if (i < 0 || i >= N) throw ShapeError("select_samples: index out of range");
  std::vector<int> shape = x->value.shape();
  shape[0] = static_cast<int>(indices.size());
  Tensor out(shape);
  for (std::size_t k = 0; k < indices.size(); ++k)
    std::copy_n(x->value.data() + static_cast<std::size_t>(indices[k]) * item, item, out.data() + k * item);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, indices, item](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (std::size_t k = 0; k < indices.size(); ++k) {
      real* dst = g.data() + static_cast<std::size_t>(indices[k]) * item;
      const real* src = self.grad.data() + k * item;
      for (std::size_t i = 0; i < item; ++i) dst[i] += src[i];
    }
  });
}

inline VarPtr sample_features(const VarPtr& x, int sample) {
  const int C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  if (sample < 0 || sample >= x->value.dim(0)) throw ShapeError("sample_features: index out of range");
  Tensor out({H * W, C});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) out.at2(h * W + w, c) = x->value.at4(sample, c, h, w);
  Node* xp = x.get();
  return make_op(std::move(out), {x}, [xp, sample, C, H, W](Node& self) {
    if (!xp->requires_grad) return;
    Tensor& g = xp->ensure_grad();
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) g.at4(sample, c, h, w) += self.grad.at2(h * W + w, c);
  });
}

// Mean cross-entropy over rows of logits [N,C] against integer targets,
// computed with max-subtraction.
inline VarPtr cross_entropy_logits(const VarPtr& logits, const std::vector<int>& targets) {
  const int N = logits->value.dim(0), C = logits->value.dim(1);
  if (static_cast<int>(targets.size()) != N) throw ShapeError("cross_entropy_logits: target count");
  for (int t : targets)
    if (t < 0 || t >= C) throw ArgumentError("cross_entropy_logits: class index out of range");
  Tensor probs({N, C});
  real loss = 0;
  for (int i = 0; i < N; ++i) {
    real mx = logits->value.at2(i, 0);
    for (int j = 1; j < C; ++j) mx = std::max(mx, logits->value.at2(i, j));
    real z = 0;
    for (int j = 0; j < C; ++j) {
      const real e = std::exp(logits->value.at2(i, j) - mx);
      probs.at2(i, j) = e;
      z += e;
    }
    for (int j = 0; j < C; ++j) probs.at2(i, j) /= z;
    loss += std::log(z) + mx - logits->value.at2(i, targets[static_cast<std::size_t>(i)]);
  }
  loss /= static_cast<real>(N);
  Node* lp = logits.get();
  return make_op(Tensor::scalar(loss), {logits},
                 [lp, probs = std::move(probs), targets, N, C](Node& self) {
                   if (!lp->requires_grad) return;
                   Tensor& g = lp->ensure_grad();
                   const real gv = self.grad[0] / static_cast<real>(N);
                   for (int i = 0; i < N; ++i)
                     for (int j = 0; j < C; ++j)
                       g.at2(i, j) += gv * (probs.at2(i, j) - (j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
                 });
}

// out[n,k] = sum_{r,b} W[k,r,b] * s[n,r] * c[n,b]
inline VarPtr bilinear_mix(const VarPtr& s, const VarPtr& c, const VarPtr& w) {
  if (s->value.rank() != 2 || c->value.rank() != 2 || w->value.rank() != 3)
    throw ShapeError("bilinear_mix: need [N,R], [N,B], [K,R,B]");
  const int N = s->value.dim(0), R = s->value.dim(1), B = c->value.dim(1);
  const int K = w->value.dim(0);
  if (w->value.dim(1) != R || w->value.dim(2) != B || c->value.dim(0) != N)
    throw ShapeError("bilinear_mix: dimension mismatch");
  Tensor out({N, K});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      real acc = 0;
      for (int r = 0; r < R; ++r) {
        const real sv = s->value.at2(n, r);
        const real* wrow = w->value.data() + (static_cast<std::size_t>(k) * R + r) * B;
        const real* crow = c->value.data() + static_cast<std::size_t>(n) * B;
        real inner = 0;
        for (int b = 0; b < B; ++b) inner += wrow[b] * crow[b];
        acc += sv * inner;
      }
      out.at2(n, k) = acc;
    }
  Node* sp = s.get();
  Node* cp = c.get();
  Node* wp = w.get();
  return make_op(std::move(out), {s, c, w}, [sp, cp, wp, N, R, B, K](Node& self) {
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) {
        const real gv = self.grad.at2(n, k);
        if (gv == 0.0) continue;
        for (int r = 0; r < R; ++r) {
          const real sv = sp->value.at2(n, r);
          const real* wrow = wp->value.data() + (static_cast<std::size_t>(k) * R + r) * B;
          const real* crow = cp->value.data() + static_cast<std::size_t>(n) * B;
          if (sp->requires_grad) {
            real inner = 0;
            for (int b = 0; b < B; ++b) inner += wrow[b] * crow[b];
            sp->ensure_grad().at2(n, r) += gv * inner;
          }
          if (cp->requires_grad) {
            real* crow_g = cp->ensure_grad().data() + static_cast<std::size_t>(n) * B;
            for (int b = 0; b < B; ++b) crow_g[b] += gv * sv * wrow[b];
          }
          if (wp->requires_grad) {
            real* wrow_g = wp->ensure_grad().data() + (static_cast<std::size_t>(k) * R + r) * B;
            for (int b = 0; b < B; ++b) wrow_g[b] += gv * sv * crow[b];
          }
        }
      }
  });
}

}  // namespace fontgen::ad
