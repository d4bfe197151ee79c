#include "ifan/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <utility>

extern "C" void openblas_set_num_threads(int);

namespace ifan {

int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

void dgemm_rm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
              const double* a, int lda, const double* b, int ldb, double beta,
              double* c, int ldc) {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  t.data = std::make_shared<TensorData>();
  int n = numel_of(shape);
  t.data->shape = std::move(shape);
  t.data->v.assign(static_cast<size_t>(n), 0.0);
  t.data->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data->v.begin(), t.data->v.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::of(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != static_cast<int>(values.size()))
    throw ShapeError("Tensor::of: shape does not match value count");
  Tensor t;
  t.data = std::make_shared<TensorData>();
  t.data->shape = std::move(shape);
  t.data->v = std::move(values);
  t.data->requires_grad = requires_grad;
  return t;
}

double Tensor::value() const {
  if (numel() != 1) throw ShapeError("Tensor::value: tensor is not a scalar");
  return data->v[0];
}

std::vector<double>& Tensor::grad() {
  if (data->grad.empty()) data->grad.assign(data->v.size(), 0.0);
  return data->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (data->grad.empty()) data->grad.assign(data->v.size(), 0.0);
  return data->grad;
}

void Tensor::zero_grad() {
  if (!data->grad.empty()) std::fill(data->grad.begin(), data->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
  Tensor t;
  t.data = std::make_shared<TensorData>();
  t.data->shape = data->shape;
  t.data->v = data->v;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : data->v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local Tape* g_active_tape = nullptr;
// Global pass counter so adjoint stamps from a destroyed tape can never be
// mistaken for fresh ones by a later tape.
std::uint64_t g_pass_counter = 0;
}  // namespace

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(const char* op, std::vector<DataPtr> inputs, DataPtr output,
                  std::function<void(Tape&)> backward) {
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

std::vector<double>& Tape::adj(const DataPtr& t) {
  if (t->adj_pass != pass_) {
    t->adj.assign(t->v.size(), 0.0);
    t->adj_pass = pass_;
    touched_.push_back(t.get());
  }
  return t->adj;
}

const std::vector<double>* Tape::adj_if(const DataPtr& t) const {
  return t->adj_pass == pass_ ? &t->adj : nullptr;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar tensor");
  pass_ = ++g_pass_counter;
  touched_.clear();
  adj(loss.data)[0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.output->adj_pass == pass_) n.backward(*this);
  }
  for (TensorData* t : touched_) {
    if (!t->requires_grad) continue;
    if (t->grad.empty()) t->grad.assign(t->v.size(), 0.0);
    for (size_t i = 0; i < t->grad.size(); ++i) t->grad[i] += t->adj[i];
  }
}

// ---------------------------------------------------------------------------
// ops

namespace ops {

namespace {

bool tracking(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ins)
    if (t->data->requires_grad) return true;
  return false;
}

Tensor make_out(Shape shape, bool requires_grad) {
  return Tensor::zeros(std::move(shape), requires_grad);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  bool rec = tracking({&a, &b});
  Tensor out = make_out(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (rec) {
    auto ad = a.data, bd = b.data, od = out.data;
    Tape::active()->record("add", {ad, bd}, od, [ad, bd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      if (ad->requires_grad) {
        auto& ga = t.adj(ad);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bd->requires_grad) {
        auto& gb = t.adj(bd);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  bool rec = tracking({&a, &b});
  Tensor out = make_out(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (rec) {
    auto ad = a.data, bd = b.data, od = out.data;
    Tape::active()->record("sub", {ad, bd}, od, [ad, bd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      if (ad->requires_grad) {
        auto& ga = t.adj(ad);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bd->requires_grad) {
        auto& gb = t.adj(bd);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  bool rec = tracking({&a, &b});
  Tensor out = make_out(a.shape(), rec);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (rec) {
    auto ad = a.data, bd = b.data, od = out.data;
    Tape::active()->record("mul", {ad, bd}, od, [ad, bd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      if (ad->requires_grad) {
        auto& ga = t.adj(ad);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd->v[i];
      }
      if (bd->requires_grad) {
        auto& gb = t.adj(bd);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad->v[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * c;
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("scale", {xd}, od, [xd, od, c](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
  }
  return out;
}

Tensor add_const(const Tensor& x, double c) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + c;
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("add_const", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("relu", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i)
        if (xd->v[i] > 0.0) gx[i] += g[i];
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    double v = xv[i];
    ov[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                     : std::exp(v) / (1.0 + std::exp(v));
  }
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("sigmoid", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) {
        double y = od->v[i];
        gx[i] += g[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor square(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * xv[i];
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("square", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 2.0 * xd->v[i];
    });
  }
  return out;
}

Tensor sqrt(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(xv[i]);
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("sqrt", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i)
        if (od->v[i] > 0.0) gx[i] += g[i] * 0.5 / od->v[i];
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(xv[i]);
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("log", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xd->v[i];
    });
  }
  return out;
}

Tensor smooth_l1(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) {
    double a = std::abs(xv[i]);
    ov[i] = a < 1.0 ? 0.5 * xv[i] * xv[i] : a - 0.5;
  }
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("smooth_l1", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) {
        double v = xd->v[i];
        double d = std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0);
        gx[i] += g[i] * d;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  bool rec = tracking({&x});
  Tensor out = make_out({1}, rec);
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values()[0] = s;
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("sum", {xd}, od, [xd, od](Tape& t) {
      double g = (*t.adj_if(od))[0];
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  bool rec = tracking({&x});
  Tensor out = make_out({1}, rec);
  double s = 0.0;
  for (double v : x.values()) s += v;
  double inv_n = 1.0 / static_cast<double>(x.numel());
  out.values()[0] = s * inv_n;
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("mean", {xd}, od, [xd, od, inv_n](Tape& t) {
      double g = (*t.adj_if(od))[0] * inv_n;
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("softmax_rows: expected rank-2 tensor");
  int n = x.dim(0), m = x.dim(1);
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int r = 0; r < n; ++r) {
    const double* row = &xv[static_cast<size_t>(r) * m];
    double* orow = &ov[static_cast<size_t>(r) * m];
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < m; ++j) orow[j] /= z;
  }
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("softmax_rows", {xd}, od, [xd, od, n, m](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (int r = 0; r < n; ++r) {
        const double* y = &od->v[static_cast<size_t>(r) * m];
        const double* gr = &g[static_cast<size_t>(r) * m];
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += gr[j] * y[j];
        double* gxr = &gx[static_cast<size_t>(r) * m];
        for (int j = 0; j < m; ++j) gxr[j] += y[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_mean: expected rank-2 logits");
  int n = logits.dim(0), m = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy_mean: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= m) throw ShapeError("cross_entropy_mean: target out of range");
  bool rec = tracking({&logits});
  Tensor out = make_out({1}, rec);
  const auto& xv = logits.values();
  std::vector<double> probs(static_cast<size_t>(n) * m);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const double* row = &xv[static_cast<size_t>(r) * m];
    double* p = &probs[static_cast<size_t>(r) * m];
    double mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      p[j] = std::exp(row[j] - mx);
      z += p[j];
    }
    for (int j = 0; j < m; ++j) p[j] /= z;
    total += mx + std::log(z) - row[targets[static_cast<size_t>(r)]];
  }
  out.values()[0] = total / n;
  if (rec) {
    auto xd = logits.data, od = out.data;
    auto tv = targets;
    Tape::active()->record(
        "cross_entropy_mean", {xd}, od,
        [xd, od, probs = std::move(probs), tv = std::move(tv), n, m](Tape& t) {
          double g = (*t.adj_if(od))[0] / n;
          auto& gx = t.adj(xd);
          for (int r = 0; r < n; ++r) {
            const double* p = &probs[static_cast<size_t>(r) * m];
            double* gxr = &gx[static_cast<size_t>(r) * m];
            for (int j = 0; j < m; ++j)
              gxr[j] += g * (p[j] - (j == tv[static_cast<size_t>(r)] ? 1.0 : 0.0));
          }
        });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("linear: expected x[N,in], w[out,in], b[out]");
  int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in || b.dim(0) != out_dim)
    throw ShapeError("linear: dimension mismatch");
  bool rec = tracking({&x, &w, &b});
  Tensor out = make_out({n, out_dim}, rec);
  dgemm_rm(false, true, n, out_dim, in, 1.0, x.values().data(), in,
           w.values().data(), in, 0.0, out.values().data(), out_dim);
  auto& ov = out.values();
  const auto& bv = b.values();
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < out_dim; ++j) ov[static_cast<size_t>(r) * out_dim + j] += bv[j];
  if (rec) {
    auto xd = x.data, wd = w.data, bd = b.data, od = out.data;
    Tape::active()->record("linear", {xd, wd, bd}, od,
                           [xd, wd, bd, od, n, in, out_dim](Tape& t) {
      const auto& g = *t.adj_if(od);
      if (xd->requires_grad) {
        auto& gx = t.adj(xd);
        dgemm_rm(false, false, n, in, out_dim, 1.0, g.data(), out_dim,
                 wd->v.data(), in, 1.0, gx.data(), in);
      }
      if (wd->requires_grad) {
        auto& gw = t.adj(wd);
        dgemm_rm(true, false, out_dim, in, n, 1.0, g.data(), out_dim,
                 xd->v.data(), in, 1.0, gw.data(), in);
      }
      if (bd->requires_grad) {
        auto& gb = t.adj(bd);
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < out_dim; ++j) gb[j] += g[static_cast<size_t>(r) * out_dim + j];
      }
    });
  }
  return out;
}

namespace {

// col layout: [C*kh*kw, Ho*Wo]
void im2col(const double* x, int c, int h, int w, int kh, int kw, int stride,
            int pad, int ho, int wo, double* col) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* dst = col + (static_cast<size_t>(ch) * kh * kw + ky * kw + kx) *
                                (static_cast<size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            dst[static_cast<size_t>(oy) * wo + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? x[(static_cast<size_t>(ch) * h + iy) * w + ix]
                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int c, int h, int w, int kh, int kw,
                int stride, int pad, int ho, int wo, double* x) {
  for (int ch = 0; ch < c; ++ch) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* src = col + (static_cast<size_t>(ch) * kh * kw + ky * kw + kx) *
                                      (static_cast<size_t>(ho) * wo);
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<size_t>(ch) * h + iy) * w + ix] +=
                src[static_cast<size_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
    throw ShapeError("conv2d: expected x[N,C,H,W], w[K,C,kh,kw], b[K]");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
  int k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) throw ShapeError("conv2d: channel mismatch");
  if (b.dim(0) != k) throw ShapeError("conv2d: bias size mismatch");
  int hnum = h + 2 * pad - kh;
  int wnum = ww + 2 * pad - kw;
  if (hnum < 0 || wnum < 0 || hnum % stride != 0 || wnum % stride != 0)
    throw ConfigError("conv2d: output size is not an integer");
  int ho = hnum / stride + 1;
  int wo = wnum / stride + 1;

  bool rec = tracking({&x, &w, &b});
  Tensor out = make_out({n, k, ho, wo}, rec);
  int spatial = ho * wo;
  int ckk = c * kh * kw;
  bool identity_cols = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

  // saved for backward: one col matrix per batch element (unless 1x1/identity)
  auto cols = std::make_shared<std::vector<std::vector<double>>>();
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    const double* xi = &xv[static_cast<size_t>(i) * c * h * ww];
    const double* col;
    if (identity_cols) {
      col = xi;
    } else {
      cols->emplace_back(static_cast<size_t>(ckk) * spatial);
      im2col(xi, c, h, ww, kh, kw, stride, pad, ho, wo, cols->back().data());
      col = cols->back().data();
    }
    double* oi = &ov[static_cast<size_t>(i) * k * spatial];
    dgemm_rm(false, false, k, spatial, ckk, 1.0, wv.data(), ckk, col, spatial,
             0.0, oi, spatial);
    for (int kk = 0; kk < k; ++kk) {
      double bias = bv[kk];
      double* row = oi + static_cast<size_t>(kk) * spatial;
      for (int s = 0; s < spatial; ++s) row[s] += bias;
    }
  }

  if (rec) {
    auto xd = x.data, wd = w.data, bd = b.data, od = out.data;
    Tape::active()->record(
        "conv2d", {xd, wd, bd}, od,
        [xd, wd, bd, od, cols, n, c, h, ww, k, kh, kw, stride, pad, ho, wo,
         spatial, ckk, identity_cols](Tape& t) {
          const auto& g = *t.adj_if(od);
          std::vector<double> dcol;
          if (xd->requires_grad) dcol.resize(static_cast<size_t>(ckk) * spatial);
          for (int i = 0; i < n; ++i) {
            const double* gi = &g[static_cast<size_t>(i) * k * spatial];
            const double* col = identity_cols
                                    ? &xd->v[static_cast<size_t>(i) * c * h * ww]
                                    : (*cols)[static_cast<size_t>(i)].data();
            if (wd->requires_grad) {
              auto& gw = t.adj(wd);
              dgemm_rm(false, true, k, ckk, spatial, 1.0, gi, spatial, col,
                       spatial, 1.0, gw.data(), ckk);
            }
            if (bd->requires_grad) {
              auto& gb = t.adj(bd);
              for (int kk = 0; kk < k; ++kk) {
                const double* row = gi + static_cast<size_t>(kk) * spatial;
                double s = 0.0;
                for (int j = 0; j < spatial; ++j) s += row[j];
                gb[kk] += s;
              }
            }
            if (xd->requires_grad) {
              auto& gx = t.adj(xd);
              double* gxi = &gx[static_cast<size_t>(i) * c * h * ww];
              if (identity_cols) {
                dgemm_rm(true, false, ckk, spatial, k, 1.0, wd->v.data(), ckk,
                         gi, spatial, 1.0, gxi, spatial);
              } else {
                dgemm_rm(true, false, ckk, spatial, k, 1.0, wd->v.data(), ckk,
                         gi, spatial, 0.0, dcol.data(), spatial);
                col2im_add(dcol.data(), c, h, ww, kh, kw, stride, pad, ho, wo, gxi);
              }
            }
          }
        });
  }
  return out;
}

Tensor max_pool2x2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("max_pool2x2: expected rank-4 tensor");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("max_pool2x2: spatial dims must be even");
  int ho = h / 2, wo = w / 2;
  bool rec = tracking({&x});
  Tensor out = make_out({n, c, ho, wo}, rec);
  auto argmax = std::make_shared<std::vector<int>>(out.values().size());
  const auto& xv = x.values();
  auto& ov = out.values();
  size_t oi = 0;
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = &xv[(static_cast<size_t>(i) * c + ch) * h * w];
      size_t plane_base = (static_cast<size_t>(i) * c + ch) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          int iy = oy * 2, ix = ox * 2;
          int best = iy * w + ix;
          double bv = plane[best];
          const int cand[3] = {iy * w + ix + 1, (iy + 1) * w + ix, (iy + 1) * w + ix + 1};
          for (int cc : cand) {
            if (plane[cc] > bv) {
              bv = plane[cc];
              best = cc;
            }
          }
          ov[oi] = bv;
          (*argmax)[oi] = static_cast<int>(plane_base) + best;
        }
      }
    }
  }
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("max_pool2x2", {xd}, od, [xd, od, argmax](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>((*argmax)[i])] += g[i];
    });
  }
  return out;
}

Tensor grl(const Tensor& x, double lambda) {
  if (lambda < 0.0) throw ConfigError("grl: lambda must be non-negative");
  bool rec = tracking({&x});
  Tensor out = make_out(x.shape(), rec);
  out.values() = x.values();
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("grl", {xd}, od, [xd, od, lambda](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += -lambda * g[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
  bool rec = tracking({&x});
  Tensor out = make_out(std::move(shape), rec);
  out.values() = x.values();
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("reshape", {xd}, od, [xd, od](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("concat_rows: no inputs");
  int d = rows[0].numel();
  for (const Tensor& r : rows)
    if (r.numel() != d) throw ShapeError("concat_rows: row size mismatch");
  int n = static_cast<int>(rows.size());
  bool rec = false;
  if (Tape::active())
    for (const Tensor& r : rows)
      if (r.requires_grad()) rec = true;
  Tensor out = make_out({n, d}, rec);
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    std::memcpy(&ov[static_cast<size_t>(i) * d], rows[static_cast<size_t>(i)].values().data(),
                sizeof(double) * static_cast<size_t>(d));
  if (rec) {
    std::vector<DataPtr> ins;
    ins.reserve(rows.size());
    for (const Tensor& r : rows) ins.push_back(r.data);
    auto od = out.data;
    Tape::active()->record("concat_rows", ins, od, [ins, od, d](Tape& t) {
      const auto& g = *t.adj_if(od);
      for (size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        auto& gx = t.adj(ins[i]);
        const double* gr = &g[i * static_cast<size_t>(d)];
        for (int j = 0; j < d; ++j) gx[static_cast<size_t>(j)] += gr[j];
      }
    });
  }
  return out;
}

Tensor slice_row(const Tensor& x, int row) {
  if (x.rank() != 2) throw ShapeError("slice_row: expected rank-2 tensor");
  int n = x.dim(0), d = x.dim(1);
  if (row < 0 || row >= n) throw ShapeError("slice_row: row out of range");
  bool rec = tracking({&x});
  Tensor out = make_out({d}, rec);
  std::memcpy(out.values().data(), &x.values()[static_cast<size_t>(row) * d],
              sizeof(double) * static_cast<size_t>(d));
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("slice_row", {xd}, od, [xd, od, row, d](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (int j = 0; j < d; ++j) gx[static_cast<size_t>(row) * d + j] += g[static_cast<size_t>(j)];
    });
  }
  return out;
}

Tensor select_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 2) throw ShapeError("select_rows: expected rank-2 tensor");
  int n = x.dim(0), d = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= n) throw ShapeError("select_rows: row out of range");
  int k = static_cast<int>(rows.size());
  bool rec = tracking({&x});
  Tensor out = make_out({k, d}, rec);
  auto& ov = out.values();
  for (int i = 0; i < k; ++i)
    std::memcpy(&ov[static_cast<size_t>(i) * d],
                &x.values()[static_cast<size_t>(rows[static_cast<size_t>(i)]) * d],
                sizeof(double) * static_cast<size_t>(d));
  if (rec) {
    auto xd = x.data, od = out.data;
    auto rr = rows;
    Tape::active()->record("select_rows", {xd}, od, [xd, od, rr = std::move(rr), d](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (size_t i = 0; i < rr.size(); ++i) {
        const double* gr = &g[i * static_cast<size_t>(d)];
        double* dst = &gx[static_cast<size_t>(rr[i]) * d];
        for (int j = 0; j < d; ++j) dst[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor pick(const Tensor& x, int flat_index) {
  if (flat_index < 0 || flat_index >= x.numel())
    throw ShapeError("pick: index out of range");
  bool rec = tracking({&x});
  Tensor out = make_out({1}, rec);
  out.values()[0] = x.values()[static_cast<size_t>(flat_index)];
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("pick", {xd}, od, [xd, od, flat_index](Tape& t) {
      double g = (*t.adj_if(od))[0];
      t.adj(xd)[static_cast<size_t>(flat_index)] += g;
    });
  }
  return out;
}

Tensor spatial_mean(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("spatial_mean: expected rank-4 tensor");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int hw = h * w;
  bool rec = tracking({&x});
  Tensor out = make_out({n, c}, rec);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = &xv[(static_cast<size_t>(i) * c + ch) * hw];
      double s = 0.0;
      for (int j = 0; j < hw; ++j) s += plane[j];
      ov[static_cast<size_t>(i) * c + ch] = s / hw;
    }
  }
  if (rec) {
    auto xd = x.data, od = out.data;
    Tape::active()->record("spatial_mean", {xd}, od, [xd, od, n, c, hw](Tape& t) {
      const auto& g = *t.adj_if(od);
      auto& gx = t.adj(xd);
      for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
          double gv = g[static_cast<size_t>(i) * c + ch] / hw;
          double* plane = &gx[(static_cast<size_t>(i) * c + ch) * hw];
          for (int j = 0; j < hw; ++j) plane[j] += gv;
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace ifan
