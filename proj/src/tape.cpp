#include "rulmae/tape.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "rulmae/error.hpp"

namespace rulmae {
namespace {

// C = (or +=) A * B       A: [m,k]  B: [k,n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool acc) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = (or +=) A * B^T     A: [m,k]  B: [n,k]
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = acc ? crow[j] + s : s;
    }
  }
}

// C = (or +=) A^T * B     A: [k,m]  B: [k,n]
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool acc) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = (or +=) A^T * B^T   A: [k,m]  B: [n,k]
void mm_tt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool acc) {
  if (!acc) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
      crow[j] += s;
    }
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

VarId Tape::push(Tensor value, bool needs, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(value);
  n.needs = needs;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return VarId{nodes_.size() - 1};
}

Tensor& Tape::grad_ref(std::size_t i) {
  Node& n = nodes_[i];
  if (n.grad.empty()) n.grad = Tensor(val(i).shape());
  return n.grad;
}

VarId Tape::leaf(const Tensor& external, bool requires_grad) {
  Node n;
  n.external = &external;
  n.needs = requires_grad;
  nodes_.push_back(std::move(n));
  return VarId{nodes_.size() - 1};
}

VarId Tape::constant(Tensor owned) { return push(std::move(owned), false, {}); }

const Tensor& Tape::value(VarId id) const { return val(id.index); }

const Tensor& Tape::grad(VarId id) const {
  const Node& n = nodes_[id.index];
  if (n.grad.empty()) {
    if (zero_.shape() != val(id.index).shape()) {
      zero_ = Tensor(val(id.index).shape());
    }
    return zero_;
  }
  return n.grad;
}

bool Tape::requires_grad(VarId id) const { return nodes_[id.index].needs; }

void Tape::backward(VarId loss) {
  const Tensor& l = val(loss.index);
  if (l.size() != 1) raise(ErrorCode::ShapeMismatch, "backward starts from a scalar");
  grad_ref(loss.index)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs || !n.back || n.grad.empty()) continue;
    n.back(*this);
  }
  ran_backward_ = true;
}

VarId Tape::matmul(VarId a, VarId b, bool trans_a, bool trans_b) {
  const Tensor& A = val(a.index);
  const Tensor& B = val(b.index);
  if (A.rank() != 2 || B.rank() != 2) {
    raise(ErrorCode::ShapeMismatch, "matmul expects rank-2 operands, got " +
                                        A.shape_str() + " and " + B.shape_str());
  }
  const std::size_t m = trans_a ? A.dim(1) : A.dim(0);
  const std::size_t k = trans_a ? A.dim(0) : A.dim(1);
  const std::size_t kb = trans_b ? B.dim(1) : B.dim(0);
  const std::size_t n = trans_b ? B.dim(0) : B.dim(1);
  if (k != kb) {
    raise(ErrorCode::ShapeMismatch,
          "matmul inner dims differ: " + A.shape_str() + " vs " + B.shape_str());
  }
  Tensor out({m, n});
  if (!trans_a && !trans_b) mm_nn(A.data(), B.data(), out.data(), m, k, n, false);
  else if (!trans_a && trans_b) mm_nt(A.data(), B.data(), out.data(), m, k, n, false);
  else if (trans_a && !trans_b) mm_tn(A.data(), B.data(), out.data(), m, k, n, false);
  else mm_tt(A.data(), B.data(), out.data(), m, k, n, false);

  const bool na = nodes_[a.index].needs, nb = nodes_[b.index].needs;
  std::function<void(Tape&)> back;
  if (na || nb) {
    const std::size_t self = nodes_.size();
    back = [self, a, b, trans_a, trans_b, m, k, n, na, nb](Tape& t) {
      const double* g = t.nodes_[self].grad.data();
      const Tensor& A2 = t.val(a.index);
      const Tensor& B2 = t.val(b.index);
      if (na) {
        double* da = t.grad_ref(a.index).data();
        if (!trans_a && !trans_b) mm_nt(g, B2.data(), da, m, n, k, true);
        else if (!trans_a && trans_b) mm_nn(g, B2.data(), da, m, n, k, true);
        else if (trans_a && !trans_b) mm_nt(B2.data(), g, da, k, n, m, true);
        else mm_tt(B2.data(), g, da, k, n, m, true);
      }
      if (nb) {
        double* db = t.grad_ref(b.index).data();
        if (!trans_a && !trans_b) mm_tn(A2.data(), g, db, k, m, n, true);
        else if (!trans_a && trans_b) mm_tn(g, A2.data(), db, n, m, k, true);
        else if (trans_a && !trans_b) mm_nn(A2.data(), g, db, k, m, n, true);
        else mm_tt(g, A2.data(), db, n, m, k, true);
      }
    };
  }
  return push(std::move(out), na || nb, std::move(back));
}

VarId Tape::add(VarId a, VarId b) {
  const Tensor& A = val(a.index);
  const Tensor& B = val(b.index);
  if (!A.same_shape(B)) {
    raise(ErrorCode::ShapeMismatch,
          "add shapes differ: " + A.shape_str() + " vs " + B.shape_str());
  }
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  const bool na = nodes_[a.index].needs, nb = nodes_[b.index].needs;
  std::function<void(Tape&)> back;
  if (na || nb) {
    const std::size_t self = nodes_.size();
    back = [self, a, b, na, nb](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      if (na) {
        Tensor& da = t.grad_ref(a.index);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (nb) {
        Tensor& db = t.grad_ref(b.index);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    };
  }
  return push(std::move(out), na || nb, std::move(back));
}

VarId Tape::add_bias(VarId x, VarId bias) {
  const Tensor& X = val(x.index);
  const Tensor& B = val(bias.index);
  if (B.rank() != 1 || X.rank() < 1 || X.shape().back() != B.dim(0)) {
    raise(ErrorCode::ShapeMismatch,
          "add_bias: " + X.shape_str() + " with bias " + B.shape_str());
  }
  const std::size_t n = B.dim(0);
  const std::size_t rows = X.size() / n;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = X[r * n + j] + B[j];
  }
  const bool nx = nodes_[x.index].needs, nb = nodes_[bias.index].needs;
  std::function<void(Tape&)> back;
  if (nx || nb) {
    const std::size_t self = nodes_.size();
    back = [self, x, bias, rows, n, nx, nb](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      if (nx) {
        Tensor& dx = t.grad_ref(x.index);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (nb) {
        Tensor& db = t.grad_ref(bias.index);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < n; ++j) db[j] += g[r * n + j];
        }
      }
    };
  }
  return push(std::move(out), nx || nb, std::move(back));
}

VarId Tape::linear(VarId x, VarId w, VarId b) { return add_bias(matmul(x, w), b); }

VarId Tape::scale(VarId x, double c) {
  const Tensor& X = val(x.index);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * c;
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, c](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * c;
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::relu(VarId x) {
  const Tensor& X = val(x.index);
  Tensor out(X.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > 0.0 ? X[i] : 0.0;
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& X2 = t.val(x.index);
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (X2[i] > 0.0) dx[i] += g[i];
      }
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::glu(VarId value, VarId gate) {
  const Tensor& A = val(value.index);
  const Tensor& B = val(gate.index);
  if (!A.same_shape(B)) {
    raise(ErrorCode::ShapeMismatch,
          "glu shapes differ: " + A.shape_str() + " vs " + B.shape_str());
  }
  std::vector<double> sig(A.size());
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    sig[i] = sigmoid(B[i]);
    out[i] = A[i] * sig[i];
  }
  const bool na = nodes_[value.index].needs, nb = nodes_[gate.index].needs;
  std::function<void(Tape&)> back;
  if (na || nb) {
    const std::size_t self = nodes_.size();
    back = [self, value, gate, na, nb, sig = std::move(sig)](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& A2 = t.val(value.index);
      if (na) {
        Tensor& da = t.grad_ref(value.index);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * sig[i];
      }
      if (nb) {
        Tensor& db = t.grad_ref(gate.index);
        for (std::size_t i = 0; i < g.size(); ++i) {
          db[i] += g[i] * A2[i] * sig[i] * (1.0 - sig[i]);
        }
      }
    };
  }
  return push(std::move(out), na || nb, std::move(back));
}

VarId Tape::conv1d(VarId x, VarId kernels, VarId bias, std::size_t padding) {
  const Tensor& X = val(x.index);
  const Tensor& K = val(kernels.index);
  const Tensor& B = val(bias.index);
  if (K.rank() != 3 || B.rank() != 1 || (X.rank() != 2 && X.rank() != 3)) {
    raise(ErrorCode::ShapeMismatch, "conv1d: x " + X.shape_str() + ", kernels " +
                                        K.shape_str() + ", bias " + B.shape_str());
  }
  const std::size_t kw = K.dim(0), cin = K.dim(1), cout = K.dim(2);
  const bool batched = X.rank() == 3;
  const std::size_t nb_seq = batched ? X.dim(0) : 1;
  const std::size_t steps = batched ? X.dim(1) : X.dim(0);
  const std::size_t xc = batched ? X.dim(2) : X.dim(1);
  if (xc != cin || B.dim(0) != cout) {
    raise(ErrorCode::ShapeMismatch, "conv1d channel mismatch: x " + X.shape_str() +
                                        " kernels " + K.shape_str());
  }
  std::vector<std::size_t> out_shape =
      batched ? std::vector<std::size_t>{nb_seq, steps, cout}
              : std::vector<std::size_t>{steps, cout};
  Tensor out(out_shape);
  const double* xd = X.data();
  const double* kd = K.data();
  for (std::size_t s = 0; s < nb_seq; ++s) {
    const double* xs = xd + s * steps * cin;
    double* os = out.data() + s * steps * cout;
    for (std::size_t t = 0; t < steps; ++t) {
      double* orow = os + t * cout;
      for (std::size_t co = 0; co < cout; ++co) orow[co] = B[co];
      for (std::size_t dk = 0; dk < kw; ++dk) {
        const std::ptrdiff_t tt =
            static_cast<std::ptrdiff_t>(t + dk) - static_cast<std::ptrdiff_t>(padding);
        if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(steps)) continue;
        const double* xrow = xs + static_cast<std::size_t>(tt) * cin;
        const double* kslab = kd + dk * cin * cout;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double xv = xrow[ci];
          if (xv == 0.0) continue;
          const double* krow = kslab + ci * cout;
          for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * krow[co];
        }
      }
    }
  }
  const bool nx = nodes_[x.index].needs, nk = nodes_[kernels.index].needs,
             nbias = nodes_[bias.index].needs;
  std::function<void(Tape&)> back;
  if (nx || nk || nbias) {
    const std::size_t self = nodes_.size();
    back = [self, x, kernels, bias, padding, kw, cin, cout, nb_seq, steps, nx, nk,
            nbias](Tape& t) {
      const double* g = t.nodes_[self].grad.data();
      const Tensor& X2 = t.val(x.index);
      const Tensor& K2 = t.val(kernels.index);
      double* dx = nx ? t.grad_ref(x.index).data() : nullptr;
      double* dk = nk ? t.grad_ref(kernels.index).data() : nullptr;
      double* db = nbias ? t.grad_ref(bias.index).data() : nullptr;
      for (std::size_t s = 0; s < nb_seq; ++s) {
        const double* xs = X2.data() + s * steps * cin;
        const double* gs = g + s * steps * cout;
        for (std::size_t tstep = 0; tstep < steps; ++tstep) {
          const double* grow = gs + tstep * cout;
          if (db) {
            for (std::size_t co = 0; co < cout; ++co) db[co] += grow[co];
          }
          for (std::size_t dkk = 0; dkk < kw; ++dkk) {
            const std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(tstep + dkk) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(steps)) continue;
            const std::size_t ttu = static_cast<std::size_t>(tt);
            const double* krow = K2.data() + dkk * cin * cout;
            const double* xrow = xs + ttu * cin;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              double acc = 0.0;
              const double* kslab = krow + ci * cout;
              double* dkslab = dk ? dk + (dkk * cin + ci) * cout : nullptr;
              const double xv = xrow[ci];
              for (std::size_t co = 0; co < cout; ++co) {
                const double gv = grow[co];
                acc += gv * kslab[co];
                if (dkslab) dkslab[co] += gv * xv;
              }
              if (dx) dx[(s * steps + ttu) * cin + ci] += acc;
            }
          }
        }
      }
    };
  }
  return push(std::move(out), nx || nk || nbias, std::move(back));
}

VarId Tape::softmax(VarId x) {
  const Tensor& X = val(x.index);
  if (X.rank() < 1) raise(ErrorCode::ShapeMismatch, "softmax on empty tensor");
  if (!X.all_finite()) raise(ErrorCode::NonFinite, "softmax input is not finite");
  const std::size_t n = X.shape().back();
  const std::size_t rows = X.size() / n;
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double* yr = out.data() + r * n;
    double mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, rows, n](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& y = t.val(self);
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * n;
        const double* yr = y.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        double* dr = dx.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::layer_norm(VarId x, VarId gain, VarId shift) {
  constexpr double kEps = 1e-12;
  const Tensor& X = val(x.index);
  const Tensor& G = val(gain.index);
  const Tensor& S = val(shift.index);
  const std::size_t n = X.shape().back();
  if (G.rank() != 1 || S.rank() != 1 || G.dim(0) != n || S.dim(0) != n) {
    raise(ErrorCode::ShapeMismatch, "layer_norm: x " + X.shape_str() + " gain " +
                                        G.shape_str() + " shift " + S.shape_str());
  }
  const std::size_t rows = X.size() / n;
  Tensor out(X.shape());
  std::vector<double> xhat(X.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std[r] = inv;
    double* hr = xhat.data() + r * n;
    double* yr = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mean) * inv;
      yr[j] = hr[j] * G[j] + S[j];
    }
  }
  const bool nx = nodes_[x.index].needs, ng = nodes_[gain.index].needs,
             ns = nodes_[shift.index].needs;
  std::function<void(Tape&)> back;
  if (nx || ng || ns) {
    const std::size_t self = nodes_.size();
    back = [self, x, gain, shift, rows, n, nx, ng, ns, xhat = std::move(xhat),
            inv_std = std::move(inv_std)](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      const Tensor& G2 = t.val(gain.index);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = g.data() + r * n;
        const double* hr = xhat.data() + r * n;
        if (ng) {
          Tensor& dg = t.grad_ref(gain.index);
          for (std::size_t j = 0; j < n; ++j) dg[j] += gr[j] * hr[j];
        }
        if (ns) {
          Tensor& dsh = t.grad_ref(shift.index);
          for (std::size_t j = 0; j < n; ++j) dsh[j] += gr[j];
        }
        if (nx) {
          Tensor& dx = t.grad_ref(x.index);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gy = gr[j] * G2[j];
            m1 += gy;
            m2 += gy * hr[j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          double* dr = dx.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) {
            const double gy = gr[j] * G2[j];
            dr[j] += inv_std[r] * (gy - m1 - hr[j] * m2);
          }
        }
      }
    };
  }
  return push(std::move(out), nx || ng || ns, std::move(back));
}

VarId Tape::dropout(VarId x, double rate, bool train, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) raise(ErrorCode::BadRatio, "dropout rate must be in [0,1)");
  if (!train || rate == 0.0) return x;  // identity, nothing recorded
  const Tensor& X = val(x.index);
  const double keep = 1.0 - rate;
  const double inv_keep = 1.0 / keep;
  std::vector<double> mask(X.size());
  Tensor out(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = rng.uniform01() < rate ? 0.0 : inv_keep;
    out[i] = X[i] * mask[i];
  }
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, mask = std::move(mask)](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::slice_cols(VarId x, std::size_t col_begin, std::size_t col_end) {
  const Tensor& X = val(x.index);
  if (X.rank() != 2 || col_end > X.dim(1) || col_begin >= col_end) {
    raise(ErrorCode::ShapeMismatch, "slice_cols on " + X.shape_str());
  }
  const std::size_t rows = X.dim(0), cols = X.dim(1), w = col_end - col_begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = X[r * cols + col_begin + j];
  }
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, rows, cols, w, col_begin](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) {
          dx[r * cols + col_begin + j] += g[r * w + j];
        }
      }
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::concat_cols(const std::vector<VarId>& parts) {
  if (parts.empty()) raise(ErrorCode::EmptyInput, "concat_cols with no parts");
  const std::size_t rows = val(parts[0].index).dim(0);
  std::size_t total = 0;
  bool needs = false;
  for (VarId p : parts) {
    const Tensor& P = val(p.index);
    if (P.rank() != 2 || P.dim(0) != rows) {
      raise(ErrorCode::ShapeMismatch, "concat_cols row mismatch");
    }
    total += P.dim(1);
    needs = needs || nodes_[p.index].needs;
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (VarId p : parts) {
    const Tensor& P = val(p.index);
    const std::size_t w = P.dim(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) out[r * total + off + j] = P[r * w + j];
    }
    off += w;
  }
  std::function<void(Tape&)> back;
  if (needs) {
    const std::size_t self = nodes_.size();
    back = [self, parts, rows, total](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      std::size_t off2 = 0;
      for (VarId p : parts) {
        const std::size_t w = t.val(p.index).dim(1);
        if (t.nodes_[p.index].needs) {
          Tensor& dp = t.grad_ref(p.index);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) {
              dp[r * w + j] += g[r * total + off2 + j];
            }
          }
        }
        off2 += w;
      }
    };
  }
  return push(std::move(out), needs, std::move(back));
}

VarId Tape::reshape(VarId x, std::vector<std::size_t> shape) {
  const Tensor& X = val(x.index);
  if (Tensor::numel(shape) != X.size()) {
    raise(ErrorCode::ShapeMismatch, "reshape " + X.shape_str());
  }
  Tensor out(std::move(shape), std::vector<double>(X.vec()));
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::scatter_rows(VarId rows, const std::vector<std::size_t>& positions,
                         std::size_t total_rows) {
  const Tensor& R = val(rows.index);
  if (R.rank() != 2 || positions.size() != R.dim(0)) {
    raise(ErrorCode::ShapeMismatch, "scatter_rows input " + R.shape_str());
  }
  std::unordered_set<std::size_t> seen;
  for (std::size_t p : positions) {
    if (p >= total_rows) raise(ErrorCode::ShapeMismatch, "scatter_rows position out of range");
    if (!seen.insert(p).second) raise(ErrorCode::IndexOverlap, "duplicate scatter position");
  }
  const std::size_t cols = R.dim(1);
  Tensor out({total_rows, cols});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[positions[i] * cols + j] = R[i * cols + j];
  }
  const bool nr = nodes_[rows.index].needs;
  std::function<void(Tape&)> back;
  if (nr) {
    const std::size_t self = nodes_.size();
    back = [self, rows, positions, cols](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dr = t.grad_ref(rows.index);
      for (std::size_t i = 0; i < positions.size(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          dr[i * cols + j] += g[positions[i] * cols + j];
        }
      }
    };
  }
  return push(std::move(out), nr, std::move(back));
}

VarId Tape::overlap_average(VarId x, std::size_t total_steps, std::size_t patch_len,
                            std::size_t cols) {
  const Tensor& X = val(x.index);
  if (X.rank() != 2 || X.dim(1) != patch_len * cols) {
    raise(ErrorCode::ShapeMismatch, "overlap_average input " + X.shape_str());
  }
  const std::size_t n_patches = X.dim(0);
  if (n_patches + patch_len - 1 != total_steps) {
    raise(ErrorCode::ShapeMismatch, "overlap_average: patches do not tile the window");
  }
  std::vector<double> inv_count(total_steps, 0.0);
  for (std::size_t p = 0; p < n_patches; ++p) {
    for (std::size_t k = 0; k < patch_len; ++k) inv_count[p + k] += 1.0;
  }
  for (double& c : inv_count) c = 1.0 / c;
  Tensor out({total_steps, cols});
  for (std::size_t p = 0; p < n_patches; ++p) {
    for (std::size_t k = 0; k < patch_len; ++k) {
      const std::size_t t = p + k;
      for (std::size_t j = 0; j < cols; ++j) {
        out[t * cols + j] += X[p * patch_len * cols + k * cols + j] * inv_count[t];
      }
    }
  }
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, n_patches, patch_len, cols,
            inv_count = std::move(inv_count)](Tape& t) {
      const Tensor& g = t.nodes_[self].grad;
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t p = 0; p < n_patches; ++p) {
        for (std::size_t k = 0; k < patch_len; ++k) {
          const std::size_t step = p + k;
          for (std::size_t j = 0; j < cols; ++j) {
            dx[p * patch_len * cols + k * cols + j] += g[step * cols + j] * inv_count[step];
          }
        }
      }
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::weighted_sum(VarId x, const Tensor& weights) {
  const Tensor& X = val(x.index);
  if (X.size() != weights.size()) {
    raise(ErrorCode::ShapeMismatch, "weighted_sum size mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) acc += X[i] * weights[i];
  Tensor out = Tensor::scalar(acc);
  const bool nx = nodes_[x.index].needs;
  std::function<void(Tape&)> back;
  if (nx) {
    const std::size_t self = nodes_.size();
    back = [self, x, weights](Tape& t) {
      const double g0 = t.nodes_[self].grad[0];
      Tensor& dx = t.grad_ref(x.index);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g0 * weights[i];
    };
  }
  return push(std::move(out), nx, std::move(back));
}

VarId Tape::mse(VarId pred, const Tensor& target) {
  const Tensor& P = val(pred.index);
  if (!P.same_shape(target)) {
    raise(ErrorCode::ShapeMismatch,
          "mse shapes differ: " + P.shape_str() + " vs " + target.shape_str());
  }
  const double inv = 1.0 / static_cast<double>(P.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double d = P[i] - target[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc * inv);
  const bool np = nodes_[pred.index].needs;
  std::function<void(Tape&)> back;
  if (np) {
    const std::size_t self = nodes_.size();
    back = [self, pred, target, inv](Tape& t) {
      const double g0 = t.nodes_[self].grad[0];
      const Tensor& P2 = t.val(pred.index);
      Tensor& dp = t.grad_ref(pred.index);
      for (std::size_t i = 0; i < P2.size(); ++i) {
        dp[i] += g0 * 2.0 * (P2[i] - target[i]) * inv;
      }
    };
  }
  return push(std::move(out), np, std::move(back));
}

VarId Tape::mse_rows_masked(VarId pred, const Tensor& target,
                            const std::vector<std::uint8_t>& row_valid) {
  const Tensor& P = val(pred.index);
  if (!P.same_shape(target)) {
    raise(ErrorCode::ShapeMismatch,
          "mse shapes differ: " + P.shape_str() + " vs " + target.shape_str());
  }
  const std::size_t rows = P.dim(0);
  if (row_valid.size() != rows) {
    raise(ErrorCode::ShapeMismatch, "validity mask length does not match rows");
  }
  const std::size_t row_len = P.size() / rows;
  std::size_t n_valid = 0;
  for (auto v : row_valid) n_valid += v ? 1 : 0;
  if (n_valid == 0) raise(ErrorCode::AllMasked, "no valid rows for loss");
  const double inv = 1.0 / static_cast<double>(n_valid * row_len);
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_valid[r]) continue;
    for (std::size_t j = 0; j < row_len; ++j) {
      const double d = P[r * row_len + j] - target[r * row_len + j];
      acc += d * d;
    }
  }
  Tensor out = Tensor::scalar(acc * inv);
  const bool np = nodes_[pred.index].needs;
  std::function<void(Tape&)> back;
  if (np) {
    const std::size_t self = nodes_.size();
    back = [self, pred, target, row_valid, rows, row_len, inv](Tape& t) {
      const double g0 = t.nodes_[self].grad[0];
      const Tensor& P2 = t.val(pred.index);
      Tensor& dp = t.grad_ref(pred.index);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!row_valid[r]) continue;
        for (std::size_t j = 0; j < row_len; ++j) {
          const std::size_t i = r * row_len + j;
          dp[i] += g0 * 2.0 * (P2[i] - target[i]) * inv;
        }
      }
    };
  }
  return push(std::move(out), np, std::move(back));
}

VarId multi_head_attention(Tape& t, VarId q, VarId k, VarId v, VarId wq, VarId bq,
                           VarId wk, VarId bk, VarId wv, VarId bv, VarId wo, VarId bo,
                           std::size_t heads) {
  const std::size_t d = t.value(q).shape().back();
  if (heads == 0 || d % heads != 0) {
    raise(ErrorCode::BadHeadCount,
          "model width " + std::to_string(d) + " not divisible by " +
              std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  VarId qp = t.linear(q, wq, bq);
  VarId kp = t.linear(k, wk, bk);
  VarId vp = t.linear(v, wv, bv);
  std::vector<VarId> head_outs;
  head_outs.reserve(heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < heads; ++h) {
    VarId qh = t.slice_cols(qp, h * dh, (h + 1) * dh);
    VarId kh = t.slice_cols(kp, h * dh, (h + 1) * dh);
    VarId vh = t.slice_cols(vp, h * dh, (h + 1) * dh);
    VarId scores = t.scale(t.matmul(qh, kh, false, true), inv_scale);
    VarId probs = t.softmax(scores);
    head_outs.push_back(t.matmul(probs, vh));
  }
  return t.linear(t.concat_cols(head_outs), wo, bo);
}

}  // namespace rulmae
