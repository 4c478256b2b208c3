#include "mmn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mmn/error.hpp"

namespace mmn::diffcore {

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(std::string name, Tensor init, double lr_scale) {
  if (index_.count(name)) {
    throw InvalidArgument("duplicate parameter name: " + name);
  }
  index_[name] = params_.size();
  Tensor grad(init.shape());
  params_.push_back(
      Parameter{std::move(name), std::move(init), std::move(grad), lr_scale});
  return params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
  return params_[it->second];
}

bool ParameterStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    if (p.grad.shape() != p.value.shape()) {
      p.grad = Tensor(p.value.shape());
    } else {
      p.grad.fill(0.0);
    }
  }
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad.values()) sq += g * g;
  }
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Graph

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kConv2dSame: return "conv2d_same";
    case OpKind::kMaxpoolInterval: return "maxpool_interval";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kMaskedFill: return "masked_fill";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kTake: return "take";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kLogSumExp: return "logsumexp";
    case OpKind::kBceWithLogits: return "bce_with_logits";
    case OpKind::kAddN: return "add_n";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->value(id_); }

Tensor Var::grad() const { return graph_->grad(id_); }

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::kConstant, {}, std::move(value), {}, false,
                        nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::variable(Tensor value) {
  nodes_.push_back(Node{OpKind::kLeaf, {}, std::move(value), {},
                        record_gradients_, nullptr, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  // gradients are written back only by backward(), which requires recording
  Parameter* target = record_gradients_ ? const_cast<Parameter*>(&p) : nullptr;
  nodes_.push_back(
      Node{OpKind::kLeaf, {}, p.value, {}, record_gradients_, target, nullptr});
  param_nodes_[&p] = nodes_.size() - 1;
  return Var(this, nodes_.size() - 1);
}

Var Graph::emit(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
                BackwardFn backward) {
  bool needs = false;
  if (record_gradients_) {
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
  }
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs,
                        nullptr, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Tensor Graph::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

std::vector<OpRecord> Graph::records() const {
  std::vector<OpRecord> out;
  out.reserve(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    out.push_back(OpRecord{nodes_[i].kind, nodes_[i].inputs, i});
  }
  return out;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) throw InvalidArgument("loss belongs to another graph");
  if (loss.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     loss.value().shape_string());
  }
  if (backward_done_) throw InvalidArgument("backward already run on this graph");
  backward_done_ = true;

  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
  for (auto& [param, id] : param_nodes_) {
    Parameter* p = nodes_[id].param;
    if (!p) continue;
    if (p->grad.shape() != p->value.shape()) p->grad = Tensor(p->value.shape());
    const Tensor& g = nodes_[id].grad;
    if (g.empty()) continue;
    for (std::size_t k = 0; k < g.size(); ++k) p->grad[k] += g[k];
  }
}

// ---------------------------------------------------------------------------
// Operators

namespace {

Graph& graph_of(std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw InvalidArgument("uninitialized Var");
    if (g && v.graph() != g) throw InvalidArgument("Vars from different graphs");
    g = v.graph();
  }
  return *g;
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a,
                                 const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   a.shape_string() + " and " + b.shape_string());
}

// Calls fn(id) only when the input participates in differentiation.
template <typename Fn>
void if_grad(Graph& g, std::size_t id, Fn&& fn) {
  if (g.requires_grad(id)) fn(g.grad_buffer(id));
}

template <typename Forward, typename Derivative>
Var unary(OpKind kind, Var a, Forward f, Derivative df) {
  Graph& g = graph_of({a});
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t in = a.id();
  return g.emit(kind, {in}, std::move(y), [in, df](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& x = g.value(in);
      const Tensor& y = g.value(self);
      const Tensor& gy = g.out_grad(self);
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * df(x[i], y[i]);
    });
  });
}

std::size_t row_width(const Tensor& t) {
  return t.rank() == 0 ? 1 : t.shape().back();
}

}  // namespace

Var matmul(Var a, Var b, bool transpose_b) {
  Graph& g = graph_of({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2) shape_mismatch("matmul", A, B);
  const std::size_t m = A.dim(0), k = A.dim(1);
  const std::size_t n = transpose_b ? B.dim(0) : B.dim(1);
  if ((transpose_b ? B.dim(1) : B.dim(0)) != k) shape_mismatch("matmul", A, B);

  Tensor C(Shape{m, n});
  if (transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = A.data() + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* br = B.data() + j * k;
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += ar[t] * br[t];
        C[i * n + j] = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double* cr = C.data() + i * n;
      for (std::size_t t = 0; t < k; ++t) {
        const double av = A[i * k + t];
        if (av == 0.0) continue;
        const double* br = B.data() + t * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(OpKind::kMatmul, {ia, ib}, std::move(C),
                [ia, ib, m, k, n, transpose_b](Graph& g, std::size_t self) {
    const Tensor& A = g.value(ia);
    const Tensor& B = g.value(ib);
    const Tensor& G = g.out_grad(self);
    if_grad(g, ia, [&](Tensor& gA) {
      // gA = G * B^T (or G * B when B was transposed)
      for (std::size_t i = 0; i < m; ++i) {
        const double* gr = G.data() + i * n;
        double* gar = gA.data() + i * k;
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = gr[j];
            if (gv == 0.0) continue;
            const double* br = B.data() + j * k;
            for (std::size_t t = 0; t < k; ++t) gar[t] += gv * br[t];
          }
        } else {
          for (std::size_t t = 0; t < k; ++t) {
            const double* br = B.data() + t * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
            gar[t] += acc;
          }
        }
      }
    });
    if_grad(g, ib, [&](Tensor& gB) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* ar = A.data() + i * k;
        const double* gr = G.data() + i * n;
        if (transpose_b) {
          // gB[j, t] += G[i, j] * A[i, t]
          for (std::size_t j = 0; j < n; ++j) {
            const double gv = gr[j];
            if (gv == 0.0) continue;
            double* gbr = gB.data() + j * k;
            for (std::size_t t = 0; t < k; ++t) gbr[t] += gv * ar[t];
          }
        } else {
          for (std::size_t t = 0; t < k; ++t) {
            const double av = ar[t];
            if (av == 0.0) continue;
            double* gbr = gB.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) gbr[j] += av * gr[j];
          }
        }
      }
    });
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of({a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool same = A.shape() == B.shape();
  const bool row_bias =
      !same && B.rank() == 1 && A.rank() >= 1 && B.dim(0) == A.shape().back();
  if (!same && !row_bias) shape_mismatch("add", A, B);

  Tensor C = A;
  const std::size_t w = B.size();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[same ? i : i % w];
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(OpKind::kAdd, {ia, ib}, std::move(C),
                [ia, ib, same, w](Graph& g, std::size_t self) {
    const Tensor& G = g.out_grad(self);
    if_grad(g, ia, [&](Tensor& gA) {
      for (std::size_t i = 0; i < G.size(); ++i) gA[i] += G[i];
    });
    if_grad(g, ib, [&](Tensor& gB) {
      for (std::size_t i = 0; i < G.size(); ++i) gB[same ? i : i % w] += G[i];
    });
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var scale(Var a, double factor) {
  Graph& g = graph_of({a});
  Tensor y = a.value();
  for (double& v : y.values()) v *= factor;
  const std::size_t in = a.id();
  return g.emit(OpKind::kScale, {in}, std::move(y),
                [in, factor](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t i = 0; i < G.size(); ++i) gx[i] += factor * G[i];
    });
  });
}

Var relu(Var a) {
  return unary(
      OpKind::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      OpKind::kSigmoid, a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var log(Var a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary(
      OpKind::kLog, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(
      OpKind::kExp, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var sum(Var a) {
  Graph& g = graph_of({a});
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t in = a.id();
  return g.emit(OpKind::kSum, {in}, Tensor::scalar(s),
                [in](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const double gy = g.out_grad(self)[0];
      for (double& v : gx.values()) v += gy;
    });
  });
}

Var mean(Var a) {
  Graph& g = graph_of({a});
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t in = a.id();
  return g.emit(OpKind::kMean, {in}, Tensor::scalar(s / n),
                [in, n](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const double gy = g.out_grad(self)[0] / static_cast<double>(n);
      for (double& v : gx.values()) v += gy;
    });
  });
}

Var conv2d_same(Var x, Var weight, std::optional<Var> bias,
                std::span<const std::uint8_t> out_mask) {
  Graph& g = bias ? graph_of({x, weight, *bias}) : graph_of({x, weight});
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  if (X.rank() != 3 || W.rank() != 4) shape_mismatch("conv2d_same", X, W);
  const std::size_t H = X.dim(0), Wd = X.dim(1), cin = X.dim(2);
  const std::size_t K = W.dim(0), cout = W.dim(3);
  if (W.dim(1) != K || W.dim(2) != cin) shape_mismatch("conv2d_same", X, W);
  if (K % 2 == 0) {
    throw InvalidArgument("conv2d_same requires an odd kernel size, got " +
                          std::to_string(K));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
    shape_mismatch("conv2d_same", W, bias->value());
  }
  if (!out_mask.empty() && out_mask.size() != H * Wd) {
    throw ShapeError("conv2d_same: out_mask size " +
                     std::to_string(out_mask.size()) + " for grid " +
                     X.shape_string());
  }
  auto mask = std::make_shared<std::vector<std::uint8_t>>(out_mask.begin(),
                                                          out_mask.end());
  const long pad = static_cast<long>(K / 2);

  Tensor Y(Shape{H, Wd, cout});
  const double* bv = bias ? bias->value().data() : nullptr;
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < Wd; ++w) {
      if (!mask->empty() && !(*mask)[h * Wd + w]) continue;
      double* out = Y.data() + (h * Wd + w) * cout;
      if (bv) std::copy(bv, bv + cout, out);
      for (std::size_t kh = 0; kh < K; ++kh) {
        const long ih = static_cast<long>(h) + static_cast<long>(kh) - pad;
        if (ih < 0 || ih >= static_cast<long>(H)) continue;
        for (std::size_t kw = 0; kw < K; ++kw) {
          const long iw = static_cast<long>(w) + static_cast<long>(kw) - pad;
          if (iw < 0 || iw >= static_cast<long>(Wd)) continue;
          const double* in = X.data() + (ih * Wd + iw) * cin;
          const double* wk = W.data() + (kh * K + kw) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = in[ci];
            if (xv == 0.0) continue;
            const double* wr = wk + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) out[co] += xv * wr[co];
          }
        }
      }
    }
  }

  std::vector<std::size_t> inputs{x.id(), weight.id()};
  if (bias) inputs.push_back(bias->id());
  const std::size_t ix = x.id(), iw_ = weight.id();
  const std::optional<std::size_t> ib =
      bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  return g.emit(OpKind::kConv2dSame, std::move(inputs), std::move(Y),
                [ix, iw_, ib, H, Wd, cin, cout, K, pad, mask](Graph& g,
                                                             std::size_t self) {
    const Tensor& X = g.value(ix);
    const Tensor& W = g.value(iw_);
    const Tensor& G = g.out_grad(self);
    Tensor* gX = g.requires_grad(ix) ? &g.grad_buffer(ix) : nullptr;
    Tensor* gW = g.requires_grad(iw_) ? &g.grad_buffer(iw_) : nullptr;
    Tensor* gB = ib && g.requires_grad(*ib) ? &g.grad_buffer(*ib) : nullptr;
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t w = 0; w < Wd; ++w) {
        if (!mask->empty() && !(*mask)[h * Wd + w]) continue;
        const double* go = G.data() + (h * Wd + w) * cout;
        if (gB) {
          for (std::size_t co = 0; co < cout; ++co) (*gB)[co] += go[co];
        }
        for (std::size_t kh = 0; kh < K; ++kh) {
          const long ih = static_cast<long>(h) + static_cast<long>(kh) - pad;
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          for (std::size_t kw = 0; kw < K; ++kw) {
            const long iw = static_cast<long>(w) + static_cast<long>(kw) - pad;
            if (iw < 0 || iw >= static_cast<long>(Wd)) continue;
            const std::size_t in_off = (ih * Wd + iw) * cin;
            const std::size_t w_off = (kh * K + kw) * cin * cout;
            const double* in = X.data() + in_off;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* wr = W.data() + w_off + ci * cout;
              if (gX) {
                double acc = 0.0;
                for (std::size_t co = 0; co < cout; ++co) acc += go[co] * wr[co];
                (*gX)[in_off + ci] += acc;
              }
              if (gW && in[ci] != 0.0) {
                const double xv = in[ci];
                double* gwr = gW->data() + w_off + ci * cout;
                for (std::size_t co = 0; co < cout; ++co) gwr[co] += xv * go[co];
              }
            }
          }
        }
      }
    }
  });
}

Var maxpool_interval(Var clips, std::span<const std::uint8_t> valid) {
  Graph& g = graph_of({clips});
  const Tensor& X = clips.value();
  if (X.rank() != 2) throw ShapeError("maxpool_interval expects [N, d], got " +
                                      X.shape_string());
  const std::size_t N = X.dim(0), d = X.dim(1);
  if (valid.size() != N * N) {
    throw ShapeError("maxpool_interval: mask size " +
                     std::to_string(valid.size()) + " for N = " +
                     std::to_string(N));
  }
  Tensor Y(Shape{N, N, d});
  // argmax row per output coordinate; N marks an invalid cell
  auto arg = std::make_shared<std::vector<std::uint32_t>>(N * N * d,
                                                          static_cast<std::uint32_t>(N));
  std::vector<double> run(d);
  std::vector<std::uint32_t> run_arg(d);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      run[c] = X.at(i, c);
      run_arg[c] = static_cast<std::uint32_t>(i);
    }
    for (std::size_t j = i; j < N; ++j) {
      if (j > i) {
        for (std::size_t c = 0; c < d; ++c) {
          if (X.at(j, c) > run[c]) {
            run[c] = X.at(j, c);
            run_arg[c] = static_cast<std::uint32_t>(j);
          }
        }
      }
      if (!valid[i * N + j]) continue;
      const std::size_t off = (i * N + j) * d;
      for (std::size_t c = 0; c < d; ++c) {
        Y[off + c] = run[c];
        (*arg)[off + c] = run_arg[c];
      }
    }
  }
  const std::size_t in = clips.id();
  return g.emit(OpKind::kMaxpoolInterval, {in}, std::move(Y),
                [in, N, d, arg](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t cell = 0; cell < N * N; ++cell) {
        for (std::size_t c = 0; c < d; ++c) {
          const std::uint32_t r = (*arg)[cell * d + c];
          if (r == N) continue;
          gx[r * d + c] += G[cell * d + c];
        }
      }
    });
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of({x, gamma, beta});
  const Tensor& X = x.value();
  const std::size_t d = row_width(X);
  if (X.rank() == 0 || gamma.value().size() != d || beta.value().size() != d) {
    shape_mismatch("layer_norm", X, gamma.value());
  }
  const std::size_t rows = X.size() / d;
  Tensor Y(X.shape());
  // normalized values and inverse std per row, reused by backward
  auto xhat = std::make_shared<std::vector<double>>(X.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= d;
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * d + c] = h;
      Y[r * d + c] = h * gm[c] + bt[c];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return g.emit(OpKind::kLayerNorm, {ix, ig, ibt}, std::move(Y),
                [ix, ig, ibt, rows, d, xhat, inv_std](Graph& g, std::size_t self) {
    const Tensor& G = g.out_grad(self);
    const double* gm = g.value(ig).data();
    if_grad(g, ig, [&](Tensor& gg) {
      for (std::size_t i = 0; i < G.size(); ++i) gg[i % d] += G[i] * (*xhat)[i];
    });
    if_grad(g, ibt, [&](Tensor& gb) {
      for (std::size_t i = 0; i < G.size(); ++i) gb[i % d] += G[i];
    });
    if_grad(g, ix, [&](Tensor& gx) {
      for (std::size_t r = 0; r < rows; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double dh = G[r * d + c] * gm[c];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[r * d + c];
        }
        mean_dh /= d;
        mean_dh_h /= d;
        for (std::size_t c = 0; c < d; ++c) {
          const double dh = G[r * d + c] * gm[c];
          gx[r * d + c] += (*inv_std)[r] *
                           (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
        }
      }
    });
  });
}

Var l2_normalize(Var x, double eps) {
  Graph& g = graph_of({x});
  const Tensor& X = x.value();
  if (X.rank() == 0) throw ShapeError("l2_normalize of a scalar");
  const std::size_t d = row_width(X);
  const std::size_t rows = d ? X.size() / d : 0;
  Tensor Y(X.shape());
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double sq = 0.0;
    for (std::size_t c = 0; c < d; ++c) sq += xr[c] * xr[c];
    if (sq + eps <= 0.0) {
      throw NumericError("l2_normalize: zero-norm row " + std::to_string(r) +
                         " with eps = 0");
    }
    const double iv = 1.0 / std::sqrt(sq + eps);
    (*inv)[r] = iv;
    for (std::size_t c = 0; c < d; ++c) Y[r * d + c] = xr[c] * iv;
  }
  const std::size_t in = x.id();
  return g.emit(OpKind::kL2Normalize, {in}, std::move(Y),
                [in, rows, d, inv](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& X = g.value(in);
      const Tensor& G = g.out_grad(self);
      for (std::size_t r = 0; r < rows; ++r) {
        const double iv = (*inv)[r];
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += X[r * d + c] * G[r * d + c];
        const double k = dot * iv * iv * iv;
        for (std::size_t c = 0; c < d; ++c) {
          gx[r * d + c] += G[r * d + c] * iv - X[r * d + c] * k;
        }
      }
    });
  });
}

Var masked_fill(Var x, std::span<const std::uint8_t> fill_mask, double value) {
  Graph& g = graph_of({x});
  const Tensor& X = x.value();
  if (X.rank() < 2 || fill_mask.size() != X.dim(0) * X.dim(1)) {
    throw ShapeError("masked_fill: mask size " + std::to_string(fill_mask.size()) +
                     " for tensor " + X.shape_string());
  }
  const std::size_t block = X.size() / fill_mask.size();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(fill_mask.begin(),
                                                          fill_mask.end());
  Tensor Y = X;
  for (std::size_t cell = 0; cell < mask->size(); ++cell) {
    if (!(*mask)[cell]) continue;
    std::fill(Y.data() + cell * block, Y.data() + (cell + 1) * block, value);
  }
  const std::size_t in = x.id();
  return g.emit(OpKind::kMaskedFill, {in}, std::move(Y),
                [in, block, mask](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t cell = 0; cell < mask->size(); ++cell) {
        if ((*mask)[cell]) continue;
        for (std::size_t k = cell * block; k < (cell + 1) * block; ++k) {
          gx[k] += G[k];
        }
      }
    });
  });
}

Var gather_rows(Var table, std::span<const std::size_t> rows) {
  Graph& g = graph_of({table});
  const Tensor& T = table.value();
  if (T.rank() != 2) throw ShapeError("gather_rows expects [V, d], got " +
                                      T.shape_string());
  const std::size_t V = T.dim(0), d = T.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  Tensor Y(Shape{idx->size(), d});
  for (std::size_t r = 0; r < idx->size(); ++r) {
    if ((*idx)[r] >= V) {
      throw InvalidArgument("gather_rows: row " + std::to_string((*idx)[r]) +
                            " out of range " + std::to_string(V));
    }
    std::copy_n(T.data() + (*idx)[r] * d, d, Y.data() + r * d);
  }
  const std::size_t in = table.id();
  return g.emit(OpKind::kGatherRows, {in}, std::move(Y),
                [in, d, idx](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gt) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t r = 0; r < idx->size(); ++r) {
        double* dst = gt.data() + (*idx)[r] * d;
        const double* src = G.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  });
}

Var take(Var x, std::span<const std::size_t> flat_indices) {
  Graph& g = graph_of({x});
  const Tensor& X = x.value();
  auto idx = std::make_shared<std::vector<std::size_t>>(flat_indices.begin(),
                                                        flat_indices.end());
  Tensor Y(Shape{idx->size()});
  for (std::size_t k = 0; k < idx->size(); ++k) {
    if ((*idx)[k] >= X.size()) {
      throw InvalidArgument("take: index " + std::to_string((*idx)[k]) +
                            " out of range for " + X.shape_string());
    }
    Y[k] = X[(*idx)[k]];
  }
  const std::size_t in = x.id();
  return g.emit(OpKind::kTake, {in}, std::move(Y),
                [in, idx](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t k = 0; k < idx->size(); ++k) gx[(*idx)[k]] += G[k];
    });
  });
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of({x});
  Tensor Y = x.value().reshaped(std::move(shape));
  const std::size_t in = x.id();
  return g.emit(OpKind::kReshape, {in}, std::move(Y),
                [in](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& G = g.out_grad(self);
      for (std::size_t k = 0; k < G.size(); ++k) gx[k] += G[k];
    });
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows of zero parts");
  Graph& g = graph_of({parts[0]});
  const std::size_t d = parts[0].value().rank() == 2 ? parts[0].value().dim(1) : 0;
  std::size_t rows = 0;
  std::vector<std::size_t> inputs;
  for (const Var& p : parts) {
    if (p.graph() != &g) throw InvalidArgument("Vars from different graphs");
    if (p.value().rank() != 2 || p.value().dim(1) != d) {
      shape_mismatch("concat_rows", parts[0].value(), p.value());
    }
    rows += p.value().dim(0);
    inputs.push_back(p.id());
  }
  Tensor Y(Shape{rows, d});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), Y.data() + off);
    off += p.value().size();
  }
  auto ids = std::make_shared<std::vector<std::size_t>>(inputs);
  return g.emit(OpKind::kConcatRows, std::move(inputs), std::move(Y),
                [ids](Graph& g, std::size_t self) {
    const Tensor& G = g.out_grad(self);
    std::size_t off = 0;
    for (std::size_t id : *ids) {
      const std::size_t n = g.value(id).size();
      if_grad(g, id, [&](Tensor& gp) {
        for (std::size_t k = 0; k < n; ++k) gp[k] += G[off + k];
      });
      off += n;
    }
  });
}

Var logsumexp(Var x) {
  Graph& g = graph_of({x});
  const Tensor& X = x.value();
  if (X.empty()) throw ShapeError("logsumexp of empty tensor");
  const double mx = *std::max_element(X.values().begin(), X.values().end());
  double s = 0.0;
  for (double v : X.values()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  const std::size_t in = x.id();
  return g.emit(OpKind::kLogSumExp, {in}, Tensor::scalar(lse),
                [in](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gx) {
      const Tensor& X = g.value(in);
      const double lse = g.value(self)[0];
      const double gy = g.out_grad(self)[0];
      for (std::size_t k = 0; k < X.size(); ++k) {
        gx[k] += gy * std::exp(X[k] - lse);
      }
    });
  });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  Graph& g = graph_of({logits});
  const Tensor& Z = logits.value();
  if (Z.size() != targets.size()) shape_mismatch("bce_with_logits", Z, targets);
  if (Z.empty()) throw ShapeError("bce_with_logits over zero cells");
  const std::size_t n = Z.size();
  double total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double z = Z[k], y = targets[k];
    // -(y log s(z) + (1-y) log(1 - s(z))), overflow-free form
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto y = std::make_shared<Tensor>(targets);
  const std::size_t in = logits.id();
  return g.emit(OpKind::kBceWithLogits, {in}, Tensor::scalar(total / n),
                [in, n, y](Graph& g, std::size_t self) {
    if_grad(g, in, [&](Tensor& gz) {
      const Tensor& Z = g.value(in);
      const double gy = g.out_grad(self)[0] / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double z = Z[k];
        const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                  : std::exp(z) / (1.0 + std::exp(z));
        gz[k] += gy * (s - (*y)[k]);
      }
    });
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw InvalidArgument("add_n of zero terms");
  Graph& g = graph_of({terms[0]});
  Tensor Y = terms[0].value();
  std::vector<std::size_t> inputs{terms[0].id()};
  for (std::size_t t = 1; t < terms.size(); ++t) {
    if (terms[t].graph() != &g) throw InvalidArgument("Vars from different graphs");
    if (terms[t].value().shape() != Y.shape()) {
      shape_mismatch("add_n", Y, terms[t].value());
    }
    for (std::size_t k = 0; k < Y.size(); ++k) Y[k] += terms[t].value()[k];
    inputs.push_back(terms[t].id());
  }
  auto ids = std::make_shared<std::vector<std::size_t>>(inputs);
  return g.emit(OpKind::kAddN, std::move(inputs), std::move(Y),
                [ids](Graph& g, std::size_t self) {
    const Tensor& G = g.out_grad(self);
    for (std::size_t id : *ids) {
      if_grad(g, id, [&](Tensor& gt) {
        for (std::size_t k = 0; k < G.size(); ++k) gt[k] += G[k];
      });
    }
  });
}

}  // namespace mmn::diffcore
