#include "meshseq/graph.hpp"

#include <algorithm>
#include <cmath>

namespace meshseq {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

ValueId Graph::make(Tensor value, bool needs_grad) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Graph::grad_buf(ValueId id) {
  Node& n = nodes_[id];
  if (!n.grad_present) {
    n.grad = Tensor(n.value.shape());
    n.grad_present = true;
  }
  return n.grad;
}

void Graph::accumulate(ValueId id, const Tensor& g) { axpy(1.0, g, grad_buf(id)); }

const Tensor& Graph::grad(ValueId id) const {
  require(nodes_[id].grad_present, "Graph::grad: no gradient for node");
  return nodes_[id].grad;
}

ValueId Graph::constant(Tensor value) { return make(std::move(value), false); }

ValueId Graph::input(Tensor value, bool needs_grad) { return make(std::move(value), needs_grad); }

ValueId Graph::param(ParameterStore& store, const std::string& name) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return it->second;
  const Param& p = store.get(name);
  ValueId id = make(p.value, p.trainable);
  param_nodes_[name] = id;
  param_list_.push_back({name, id});
  param_trainable_[name] = p.trainable;
  return id;
}

ValueId Graph::add(ValueId a, ValueId b) {
  require(value(a).same_shape(value(b)), "Graph::add: shape mismatch");
  Tensor out = value(a);
  axpy(1.0, value(b), out);
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(a)) g.accumulate(a, go);
      if (g.needs(b)) g.accumulate(b, go);
    };
  return id;
}

ValueId Graph::sub(ValueId a, ValueId b) {
  require(value(a).same_shape(value(b)), "Graph::sub: shape mismatch");
  Tensor out = value(a);
  axpy(-1.0, value(b), out);
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(a)) g.accumulate(a, go);
      if (g.needs(b)) axpy(-1.0, go, g.grad_buf(b));
    };
  return id;
}

ValueId Graph::mul(ValueId a, ValueId b) {
  require(value(a).same_shape(value(b)), "Graph::mul: shape mismatch");
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= value(b)[i];
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(a)) {
        Tensor& ga = g.grad_buf(a);
        const Tensor& vb = g.value(b);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
      }
      if (g.needs(b)) {
        Tensor& gb = g.grad_buf(b);
        const Tensor& va = g.value(a);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
      }
    };
  return id;
}

ValueId Graph::div(ValueId a, ValueId b) {
  require(value(a).same_shape(value(b)), "Graph::div: shape mismatch");
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= value(b)[i];
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& va = g.value(a);
      const Tensor& vb = g.value(b);
      if (g.needs(a)) {
        Tensor& ga = g.grad_buf(a);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / vb[i];
      }
      if (g.needs(b)) {
        Tensor& gb = g.grad_buf(b);
        for (std::size_t i = 0; i < go.size(); ++i)
          gb[i] -= go[i] * va[i] / (vb[i] * vb[i]);
      }
    };
  return id;
}

ValueId Graph::scale(ValueId a, double c) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  ValueId id = make(std::move(out), needs(a));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, c](Graph& g, ValueId self) {
      axpy(c, g.nodes_[self].grad, g.grad_buf(a));
    };
  return id;
}

ValueId Graph::elu(ValueId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] <= 0.0) out[i] = std::expm1(out[i]);
  ValueId id = make(std::move(out), needs(a));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& y = g.value(self);
      const Tensor& x = g.value(a);
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i)
        ga[i] += go[i] * (x[i] > 0.0 ? 1.0 : y[i] + 1.0);
    };
  return id;
}

ValueId Graph::gelu(ValueId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  ValueId id = make(std::move(out), needs(a));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& x = g.value(a);
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const double xi = x[i];
        const double phi = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
        ga[i] += go[i] * (phi + xi * pdf);
      }
    };
  return id;
}

ValueId Graph::exp(ValueId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  ValueId id = make(std::move(out), needs(a));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& y = g.value(self);
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    };
  return id;
}

ValueId Graph::log(ValueId a) {
  Tensor out = value(a);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  ValueId id = make(std::move(out), needs(a));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& x = g.value(a);
      Tensor& ga = g.grad_buf(a);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / x[i];
    };
  return id;
}

ValueId Graph::matmul(ValueId a, ValueId b) {
  Tensor out({value(a).rows(), value(b).cols()});
  meshseq::matmul(value(a), value(b), out);
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(a)) meshseq::matmul_nt(go, g.value(b), g.grad_buf(a), true);
      if (g.needs(b)) meshseq::matmul_tn(g.value(a), go, g.grad_buf(b), true);
    };
  return id;
}

ValueId Graph::matmul_nt(ValueId a, ValueId b) {
  Tensor out({value(a).rows(), value(b).rows()});
  meshseq::matmul_nt(value(a), value(b), out);
  ValueId id = make(std::move(out), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(a)) meshseq::matmul(go, g.value(b), g.grad_buf(a), true);
      if (g.needs(b)) meshseq::matmul_tn(go, g.value(a), g.grad_buf(b), true);
    };
  return id;
}

ValueId Graph::linear(ValueId x, ValueId w, ValueId b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  require(xv.cols() == wv.cols(), "Graph::linear: input width mismatch");
  require(bv.size() == wv.rows(), "Graph::linear: bias size mismatch");
  Tensor out({xv.rows(), wv.rows()});
  meshseq::matmul_nt(xv, wv, out);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.row(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += bv[c];
  }
  ValueId id = make(std::move(out), needs(x) || needs(w) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, w, b](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      if (g.needs(x)) meshseq::matmul(go, g.value(w), g.grad_buf(x), true);
      if (g.needs(w)) meshseq::matmul_tn(go, g.value(x), g.grad_buf(w), true);
      if (g.needs(b)) {
        Tensor& gb = g.grad_buf(b);
        for (std::size_t r = 0; r < go.rows(); ++r) {
          const double* row = go.row(r);
          for (std::size_t c = 0; c < go.cols(); ++c) gb[c] += row[c];
        }
      }
    };
  return id;
}

ValueId Graph::spiral_gather(ValueId x, const SpiralTable& table) {
  const Tensor& xv = value(x);
  require(xv.rank() == 2 && xv.rows() == table.vertex_count,
          "Graph::spiral_gather: table/feature level mismatch");
  const std::size_t c = xv.cols(), l = table.length;
  Tensor out({table.vertex_count, l * c});
  for (std::size_t v = 0; v < table.vertex_count; ++v) {
    double* orow = out.row(v);
    for (std::size_t k = 0; k < l; ++k) {
      const std::uint32_t src = table.at(v, k);
      if (src == kSpiralPad) continue;  // pad contributes zeros
      const double* xrow = xv.row(src);
      for (std::size_t j = 0; j < c; ++j) orow[k * c + j] = xrow[j];
    }
  }
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad) {
    const SpiralTable* tp = &table;
    nodes_[id].back = [x, tp](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      const std::size_t c = gx.cols(), l = tp->length;
      for (std::size_t v = 0; v < tp->vertex_count; ++v) {
        const double* grow = go.row(v);
        for (std::size_t k = 0; k < l; ++k) {
          const std::uint32_t src = tp->at(v, k);
          if (src == kSpiralPad) continue;
          double* xrow = gx.row(src);
          for (std::size_t j = 0; j < c; ++j) xrow[j] += grow[k * c + j];
        }
      }
    };
  }
  return id;
}

ValueId Graph::gather_rows(ValueId x, std::vector<std::uint32_t> idx) {
  const Tensor& xv = value(x);
  const std::size_t c = xv.cols();
  Tensor out({idx.size(), c});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < xv.rows(), "Graph::gather_rows: index out of range");
    const double* src = xv.row(idx[r]);
    double* dst = out.row(r);
    for (std::size_t j = 0; j < c; ++j) dst[j] = src[j];
  }
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, idx = std::move(idx)](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = go.row(r);
        double* dst = gx.row(idx[r]);
        for (std::size_t j = 0; j < go.cols(); ++j) dst[j] += src[j];
      }
    };
  return id;
}

ValueId Graph::upsample(ValueId x, const SparseMatrix& u) {
  Tensor out = u.apply(value(x));
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad) {
    const SparseMatrix* up = &u;
    nodes_[id].back = [x, up](Graph& g, ValueId self) {
      up->apply_transposed_add(g.nodes_[self].grad, g.grad_buf(x));
    };
  }
  return id;
}

ValueId Graph::slice_cols(ValueId x, std::size_t start, std::size_t len) {
  const Tensor& xv = value(x);
  require(start + len <= xv.cols(), "Graph::slice_cols: out of range");
  Tensor out({xv.rows(), len});
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* src = xv.row(r) + start;
    double* dst = out.row(r);
    for (std::size_t j = 0; j < len; ++j) dst[j] = src[j];
  }
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, start, len](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      for (std::size_t r = 0; r < go.rows(); ++r) {
        const double* src = go.row(r);
        double* dst = gx.row(r) + start;
        for (std::size_t j = 0; j < len; ++j) dst[j] += src[j];
      }
    };
  return id;
}

ValueId Graph::concat_cols(const std::vector<ValueId>& xs) {
  require(!xs.empty(), "Graph::concat_cols: empty input");
  const std::size_t rows = value(xs[0]).rows();
  std::size_t total = 0;
  bool ng = false;
  for (ValueId x : xs) {
    require(value(x).rows() == rows, "Graph::concat_cols: row mismatch");
    total += value(x).cols();
    ng = ng || needs(x);
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (ValueId x : xs) {
    const Tensor& xv = value(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = xv.row(r);
      double* dst = out.row(r) + off;
      for (std::size_t j = 0; j < xv.cols(); ++j) dst[j] = src[j];
    }
    off += xv.cols();
  }
  ValueId id = make(std::move(out), ng);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [xs](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      std::size_t off = 0;
      for (ValueId x : xs) {
        const std::size_t c = g.value(x).cols();
        if (g.needs(x)) {
          Tensor& gx = g.grad_buf(x);
          for (std::size_t r = 0; r < go.rows(); ++r) {
            const double* src = go.row(r) + off;
            double* dst = gx.row(r);
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
          }
        }
        off += c;
      }
    };
  return id;
}

ValueId Graph::stack_rows(const std::vector<ValueId>& rows) {
  require(!rows.empty(), "Graph::stack_rows: empty input");
  const std::size_t d = value(rows[0]).size();
  bool ng = false;
  for (ValueId r : rows) {
    require(value(r).size() == d, "Graph::stack_rows: width mismatch");
    ng = ng || needs(r);
  }
  Tensor out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor& rv = value(rows[r]);
    double* dst = out.row(r);
    for (std::size_t j = 0; j < d; ++j) dst[j] = rv[j];
  }
  ValueId id = make(std::move(out), ng);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [rows](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (!g.needs(rows[r])) continue;
        Tensor& gr = g.grad_buf(rows[r]);
        const double* src = go.row(r);
        for (std::size_t j = 0; j < go.cols(); ++j) gr[j] += src[j];
      }
    };
  return id;
}

ValueId Graph::slice_row(ValueId x, std::size_t row) {
  const Tensor& xv = value(x);
  require(row < xv.rows(), "Graph::slice_row: out of range");
  Tensor out({1, xv.cols()});
  const double* src = xv.row(row);
  for (std::size_t j = 0; j < xv.cols(); ++j) out[j] = src[j];
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, row](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      double* dst = gx.row(row);
      for (std::size_t j = 0; j < go.size(); ++j) dst[j] += go[j];
    };
  return id;
}

ValueId Graph::reshape(ValueId x, std::vector<std::size_t> shape) {
  Tensor out = value(x);
  out.reshape(shape);
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    };
  return id;
}

ValueId Graph::layer_norm(ValueId x, ValueId gamma, ValueId beta, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gv.size() == d && bv.size() == d, "Graph::layer_norm: affine size mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor inv_std({n});
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = xv.row(r);
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    double* hr = xhat.row(r);
    double* orow = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * is;
      orow[j] = gv[j] * hr[j] + bv[j];
    }
  }
  ValueId id = make(std::move(out), needs(x) || needs(gamma) || needs(beta));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, gamma, beta, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& gv = g.value(gamma);
      const std::size_t n = go.rows(), d = go.cols();
      if (g.needs(gamma)) {
        Tensor& gg = g.grad_buf(gamma);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = go.row(r);
          const double* hr = xhat.row(r);
          for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
        }
      }
      if (g.needs(beta)) {
        Tensor& gb = g.grad_buf(beta);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = go.row(r);
          for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
        }
      }
      if (g.needs(x)) {
        Tensor& gx = g.grad_buf(x);
        for (std::size_t r = 0; r < n; ++r) {
          const double* gr = go.row(r);
          const double* hr = xhat.row(r);
          double sum_gg = 0.0, sum_ggh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double t = gr[j] * gv[j];
            sum_gg += t;
            sum_ggh += t * hr[j];
          }
          const double inv_d = 1.0 / static_cast<double>(d);
          double* xr = gx.row(r);
          for (std::size_t j = 0; j < d; ++j) {
            const double t = gr[j] * gv[j];
            xr[j] += inv_std[r] * (t - inv_d * sum_gg - hr[j] * inv_d * sum_ggh);
          }
        }
      }
    };
  return id;
}

ValueId Graph::channel_norm(ValueId x, ValueId gamma, ValueId beta, double eps) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gv.size() == d && bv.size() == d, "Graph::channel_norm: affine size mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor inv_std({d});
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t r = 0; r < n; ++r) mu += xv.at(r, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += (xv.at(r, j) - mu) * (xv.at(r, j) - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[j] = is;
    for (std::size_t r = 0; r < n; ++r) {
      xhat.at(r, j) = (xv.at(r, j) - mu) * is;
      out.at(r, j) = gv[j] * xhat.at(r, j) + bv[j];
    }
  }
  ValueId id = make(std::move(out), needs(x) || needs(gamma) || needs(beta));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, gamma, beta, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& gv = g.value(gamma);
      const std::size_t n = go.rows(), d = go.cols();
      if (g.needs(gamma)) {
        Tensor& gg = g.grad_buf(gamma);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go.at(r, j) * xhat.at(r, j);
      }
      if (g.needs(beta)) {
        Tensor& gb = g.grad_buf(beta);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go.at(r, j);
      }
      if (g.needs(x)) {
        Tensor& gx = g.grad_buf(x);
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) {
          double sum_gg = 0.0, sum_ggh = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            const double t = go.at(r, j) * gv[j];
            sum_gg += t;
            sum_ggh += t * xhat.at(r, j);
          }
          for (std::size_t r = 0; r < n; ++r) {
            const double t = go.at(r, j) * gv[j];
            gx.at(r, j) += inv_std[j] * (t - inv_n * sum_gg - xhat.at(r, j) * inv_n * sum_ggh);
          }
        }
      }
    };
  return id;
}

ValueId Graph::row_affine(ValueId x, ValueId gamma, ValueId beta) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  const std::size_t n = xv.rows(), d = xv.cols();
  require(gv.size() == d && bv.size() == d, "Graph::row_affine: affine size mismatch");
  Tensor out({n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out.at(r, j) = xv.at(r, j) * gv[j] + bv[j];
  ValueId id = make(std::move(out), needs(x) || needs(gamma) || needs(beta));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, gamma, beta](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const std::size_t n = go.rows(), d = go.cols();
      if (g.needs(x)) {
        Tensor& gx = g.grad_buf(x);
        const Tensor& gv = g.value(gamma);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gx.at(r, j) += go.at(r, j) * gv[j];
      }
      if (g.needs(gamma)) {
        Tensor& gg = g.grad_buf(gamma);
        const Tensor& xv = g.value(x);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += go.at(r, j) * xv.at(r, j);
      }
      if (g.needs(beta)) {
        Tensor& gb = g.grad_buf(beta);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go.at(r, j);
      }
    };
  return id;
}

ValueId Graph::masked_softmax(ValueId scores, const std::vector<std::uint8_t>& key_masked) {
  const Tensor& sv = value(scores);
  const std::size_t n = sv.rows(), m = sv.cols();
  require(key_masked.size() == m, "Graph::masked_softmax: mask size mismatch");
  bool any_unmasked = false;
  for (std::uint8_t km : key_masked) any_unmasked = any_unmasked || km == 0;
  require(any_unmasked, "Graph::masked_softmax: all keys masked");

  Tensor out({n, m});
  for (std::size_t r = 0; r < n; ++r) {
    const double* sr = sv.row(r);
    double mx = 0.0;
    bool first = true;
    for (std::size_t j = 0; j < m; ++j) {
      if (key_masked[j]) continue;
      if (first || sr[j] > mx) mx = sr[j];
      first = false;
    }
    double z = 0.0;
    double* orow = out.row(r);
    for (std::size_t j = 0; j < m; ++j) {
      if (key_masked[j]) {
        orow[j] = 0.0;
        continue;
      }
      orow[j] = std::exp(sr[j] - mx);
      z += orow[j];
    }
    for (std::size_t j = 0; j < m; ++j)
      if (!key_masked[j]) orow[j] /= z;
  }
  ValueId id = make(std::move(out), needs(scores));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [scores, key_masked](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      const Tensor& w = g.value(self);
      Tensor& gs = g.grad_buf(scores);
      const std::size_t n = go.rows(), m = go.cols();
      for (std::size_t r = 0; r < n; ++r) {
        const double* gr = go.row(r);
        const double* wr = w.row(r);
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j)
          if (!key_masked[j]) dot += gr[j] * wr[j];
        double* gsr = gs.row(r);
        for (std::size_t j = 0; j < m; ++j)
          if (!key_masked[j]) gsr[j] += wr[j] * (gr[j] - dot);
      }
    };
  return id;
}

ValueId Graph::sum(ValueId x) {
  double s = 0.0;
  for (std::size_t i = 0; i < value(x).size(); ++i) s += value(x)[i];
  ValueId id = make(Tensor::scalar(s), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x](Graph& g, ValueId self) {
      const double go = g.nodes_[self].grad[0];
      Tensor& gx = g.grad_buf(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
    };
  return id;
}

ValueId Graph::mean(ValueId x) {
  const std::size_t n = value(x).size();
  require(n > 0, "Graph::mean: empty tensor");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += value(x)[i];
  ValueId id = make(Tensor::scalar(s / static_cast<double>(n)), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, n](Graph& g, ValueId self) {
      const double go = g.nodes_[self].grad[0] / static_cast<double>(n);
      Tensor& gx = g.grad_buf(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
    };
  return id;
}

ValueId Graph::dot(ValueId a, ValueId b) {
  require(value(a).size() == value(b).size(), "Graph::dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < value(a).size(); ++i) s += value(a)[i] * value(b)[i];
  ValueId id = make(Tensor::scalar(s), needs(a) || needs(b));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [a, b](Graph& g, ValueId self) {
      const double go = g.nodes_[self].grad[0];
      if (g.needs(a)) axpy(go, g.value(b), g.grad_buf(a));
      if (g.needs(b)) axpy(go, g.value(a), g.grad_buf(b));
    };
  return id;
}

ValueId Graph::frobenius_norm(ValueId x) {
  double s = 0.0;
  for (std::size_t i = 0; i < value(x).size(); ++i) s += value(x)[i] * value(x)[i];
  const double n = std::sqrt(s);
  ValueId id = make(Tensor::scalar(n), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x](Graph& g, ValueId self) {
      const double nv = g.value(self)[0];
      if (nv == 0.0) return;  // subgradient choice at the origin
      const double go = g.nodes_[self].grad[0] / nv;
      axpy(go, g.value(x), g.grad_buf(x));
    };
  return id;
}

ValueId Graph::stack_scalars(const std::vector<ValueId>& xs) {
  require(!xs.empty(), "Graph::stack_scalars: empty input");
  Tensor out({xs.size()});
  bool ng = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out[i] = scalar(xs[i]);
    ng = ng || needs(xs[i]);
  }
  ValueId id = make(std::move(out), ng);
  if (nodes_[id].needs_grad)
    nodes_[id].back = [xs](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (g.needs(xs[i])) g.grad_buf(xs[i])[0] += go[i];
    };
  return id;
}

ValueId Graph::mean_rows_masked(ValueId x, const std::vector<std::uint8_t>& row_masked) {
  const Tensor& xv = value(x);
  const std::size_t n = xv.rows(), d = xv.cols();
  require(row_masked.size() == n, "Graph::mean_rows_masked: mask size mismatch");
  std::size_t kept = 0;
  for (std::uint8_t m : row_masked) kept += m == 0;
  require(kept > 0, "Graph::mean_rows_masked: all rows masked");
  Tensor out({1, d});
  for (std::size_t r = 0; r < n; ++r) {
    if (row_masked[r]) continue;
    const double* xr = xv.row(r);
    for (std::size_t j = 0; j < d; ++j) out[j] += xr[j];
  }
  for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(kept);
  ValueId id = make(std::move(out), needs(x));
  if (nodes_[id].needs_grad)
    nodes_[id].back = [x, row_masked, kept](Graph& g, ValueId self) {
      const Tensor& go = g.nodes_[self].grad;
      Tensor& gx = g.grad_buf(x);
      const double inv = 1.0 / static_cast<double>(kept);
      for (std::size_t r = 0; r < gx.rows(); ++r) {
        if (row_masked[r]) continue;
        double* xr = gx.row(r);
        for (std::size_t j = 0; j < gx.cols(); ++j) xr[j] += go[j] * inv;
      }
    };
  return id;
}

void Graph::backward(ValueId root) {
  require(value(root).size() == 1, "Graph::backward: root must be a scalar");
  require(nodes_[root].needs_grad, "Graph::backward: root does not require gradients");
  grad_buf(root)[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad_present && n.back) n.back(*this, static_cast<ValueId>(i));
  }
}

std::map<std::string, Tensor> Graph::trainable_grads() const {
  std::map<std::string, Tensor> grads;
  for (const auto& [name, id] : param_list_) {
    if (!param_trainable_.at(name)) continue;
    if (nodes_[id].grad_present)
      grads.emplace(name, nodes_[id].grad);
    else
      grads.emplace(name, Tensor(nodes_[id].value.shape()));
  }
  return grads;
}

std::map<std::string, Tensor> forward_backward(Graph& g, ValueId loss) {
  require(g.value(loss).size() == 1, "forward_backward: loss must be a scalar");
  const double lv = g.scalar(loss);
  require(std::isfinite(lv), "forward_backward: non-finite loss");
  g.backward(loss);
  auto grads = g.trainable_grads();
  for (const auto& [name, t] : grads)
    require(t.all_finite(), "forward_backward: non-finite gradient for " + name);
  return grads;
}

}  // namespace meshseq
