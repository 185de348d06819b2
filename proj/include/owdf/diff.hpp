#pragma once

// Minimal reverse-mode array engine. Rank <= 3 tensors (batch x seq x feature),
// a tape of nodes in creation order, and gradients accumulated into a named
// ParamStore. Forward inference without a backward() call is just the same
// graph with the lambdas never run.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "owdf/common.hpp"

namespace owdf::diff {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        v_(static_cast<std::size_t>(count(shape_)), fill) {}

  static Tensor scalar(double x) {
    Tensor t({1});
    t.v_[0] = x;
    return t;
  }
  static Tensor from(Shape shape, std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<long long>(data.size()) != count(t.shape_))
      throw ShapeError("Tensor::from: data size does not match shape " +
                       shape_str(t.shape_));
    t.v_ = std::move(data);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return v_.size(); }
  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  static long long count(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
  }

 private:
  Shape shape_;
  std::vector<double> v_;
};

// ---------------------------------------------------------------------------
// ParamStore: named parameter tensors with stable iteration order plus a
// gradient slot per parameter.
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  Tensor& create(const std::string& name, Shape shape) {
    if (params_.count(name))
      throw ConfigError("duplicate parameter name: " + name);
    order_.push_back(name);
    params_[name] = Tensor(shape);
    grads_[name] = Tensor(shape);
    return params_[name];
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  Tensor& grad(const std::string& name) { return grads_.at(name); }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grads() {
    for (auto& [k, g] : grads_) std::fill(g.data(), g.data() + g.size(), 0.0);
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& name : order_) n += params_.at(name).size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> params_;
  std::unordered_map<std::string, Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Tape nodes
// ---------------------------------------------------------------------------

struct Node {
  Tensor val;
  Tensor grad;  // allocated on demand during backward
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, writes parents'
  std::size_t id = 0;
  bool requires_grad = false;
  ParamStore* store = nullptr;  // set for parameter leaves
  std::string param_name;

  Tensor& ensure_grad() {
    if (grad.size() == 0) grad = Tensor(val.shape());
    return grad;
  }
};

struct Var {
  std::shared_ptr<Node> n;

  const Tensor& value() const { return n->val; }
  const Shape& shape() const { return n->val.shape(); }
  double scalar() const {
    if (n->val.size() != 1) throw ShapeError("scalar() on non-scalar tensor");
    return n->val[0];
  }
};

class Tape {
 public:
  Var make(Tensor val, std::vector<Var> parents,
           std::function<void(Node&)> backprop) {
    auto node = std::make_shared<Node>();
    node->val = std::move(val);
    node->id = next_id_++;
    for (auto& p : parents) {
      node->requires_grad = node->requires_grad || p.n->requires_grad;
      node->parents.push_back(p.n);
    }
    if (node->requires_grad) node->backprop = std::move(backprop);
    return Var{node};
  }

  Var constant(Tensor val) { return make(std::move(val), {}, nullptr); }

  Var param(ParamStore& store, const std::string& name) {
    auto node = std::make_shared<Node>();
    node->val = store.get(name);
    node->id = next_id_++;
    node->requires_grad = true;
    node->store = &store;
    node->param_name = name;
    return Var{node};
  }

  // Reverse sweep from a scalar loss. Gradients of parameter leaves are
  // accumulated into their ParamStore slots.
  void backward(const Var& loss) {
    if (loss.n->val.size() != 1)
      throw ShapeError("backward() expects a scalar loss");
    if (!std::isfinite(loss.n->val[0]))
      throw TrainingDiverged("loss is non-finite before backprop");

    // collect reachable grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.n.get()};
    while (!stack.empty()) {
      Node* cur = stack.back();
      stack.pop_back();
      if (!cur->requires_grad || seen.count(cur)) continue;
      seen.insert(cur);
      order.push_back(cur);
      for (auto& p : cur->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](Node* a, Node* b) { return a->id > b->id; });

    loss.n->ensure_grad()[0] = 1.0;
    for (Node* node : order) {
      if (node->grad.size() == 0) continue;  // no contribution reached it
      if (node->backprop) node->backprop(*node);
      if (node->store != nullptr) {
        Tensor& slot = node->store->grad(node->param_name);
        for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += node->grad[i];
      }
    }
  }

 private:
  std::size_t next_id_ = 0;
};

// ---------------------------------------------------------------------------
// gemm helper: C (m x n) (+)= op(A) * op(B)
// ---------------------------------------------------------------------------

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k,
                 const double* a, const double* b, double* c,
                 bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
  if (!trans_a && !trans_b) {
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<std::size_t>(i) * k;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // C[i,j] += dot(A row i, B row j)
    for (int i = 0; i < m; ++i) {
      const double* arow = a + static_cast<std::size_t>(i) * k;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const double* brow = b + static_cast<std::size_t>(j) * k;
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (trans_a && !trans_b) {
    // C[i,j] += sum_p A[p,i] * B[p,j]
    for (int p = 0; p < k; ++p) {
      const double* arow = a + static_cast<std::size_t>(p) * m;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        double av = arow[i];
        if (av == 0.0) continue;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p)
          acc += a[static_cast<std::size_t>(p) * m + i] *
                 b[static_cast<std::size_t>(j) * k + p];
        c[static_cast<std::size_t>(i) * n + j] += acc;
      }
  }
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

inline Var add(Tape& t, const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.value()[i] + b.value()[i];
  return t.make(std::move(out), {a, b}, [](Node& n) {
    for (int s = 0; s < 2; ++s) {
      Node& p = *n.parents[static_cast<std::size_t>(s)];
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Var sub(Tape& t, const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.value()[i] - b.value()[i];
  return t.make(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Var mul(Tape& t, const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.value()[i] * b.value()[i];
  return t.make(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.val[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.val[i];
    }
  });
}

inline Var div(Tape& t, const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = a.value()[i] / b.value()[i];
  return t.make(std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / pb.val[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= n.grad[i] * pa.val[i] / (pb.val[i] * pb.val[i]);
    }
  });
}

inline Var scale(Tape& t, const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  return t.make(std::move(out), {a}, [c](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
  });
}

inline Var add_const(Tape& t, const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + c;
  return t.make(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

// b has the shape of the last axis of x, broadcast over all leading axes
inline Var add_bias(Tape& t, const Var& x, const Var& b) {
  int nb = static_cast<int>(b.value().size());
  if (b.value().rank() != 1 || x.value().dim(x.value().rank() - 1) != nb)
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) +
                     " does not match last axis of " + shape_str(x.shape()));
  Tensor out(x.shape());
  std::size_t rows = x.value().size() / static_cast<std::size_t>(nb);
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < nb; ++j)
      out[r * nb + j] = x.value()[r * nb + j] + b.value()[static_cast<std::size_t>(j)];
  return t.make(std::move(out), {x, b}, [nb, rows](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < nb; ++j)
          g[static_cast<std::size_t>(j)] += n.grad[r * nb + j];
    }
  });
}

// m has the shape of x without its leading axis; broadcast over axis 0.
inline Var add_bcast(Tape& t, const Var& x, const Var& m) {
  if (x.value().rank() != m.value().rank() + 1)
    throw ShapeError("add_bcast: rank mismatch");
  for (int i = 0; i < m.value().rank(); ++i)
    if (x.value().dim(i + 1) != m.value().dim(i))
      throw ShapeError("add_bcast: shape mismatch " + shape_str(x.shape()) +
                       " vs " + shape_str(m.shape()));
  std::size_t inner = m.value().size();
  std::size_t batches = x.value().size() / inner;
  Tensor out(x.shape());
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t i = 0; i < inner; ++i)
      out[b * inner + i] = x.value()[b * inner + i] + m.value()[i];
  return t.make(std::move(out), {x, m}, [inner, batches](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::size_t b = 0; b < batches; ++b)
        for (std::size_t i = 0; i < inner; ++i) g[i] += n.grad[b * inner + i];
    }
  });
}

inline Var matmul(Tape& t, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() == 2 && bv.rank() == 2) {
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k)
      throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    Tensor out({m, n});
    gemm(false, false, m, n, k, av.data(), bv.data(), out.data(), false);
    return t.make(std::move(out), {a, b}, [m, n, k](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      if (pa.requires_grad)
        gemm(false, true, m, k, n, nd.grad.data(), pb.val.data(),
             pa.ensure_grad().data(), true);
      if (pb.requires_grad)
        gemm(true, false, k, n, m, pa.val.data(), nd.grad.data(),
             pb.ensure_grad().data(), true);
    });
  }
  if (av.rank() == 3 && bv.rank() == 2) {
    // shared right operand: collapse (B,T,k) to (B*T,k)
    int B = av.dim(0), T = av.dim(1), k = av.dim(2), n = bv.dim(1);
    if (bv.dim(0) != k)
      throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    int m = B * T;
    Tensor out({B, T, n});
    gemm(false, false, m, n, k, av.data(), bv.data(), out.data(), false);
    return t.make(std::move(out), {a, b}, [m, n, k](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      if (pa.requires_grad)
        gemm(false, true, m, k, n, nd.grad.data(), pb.val.data(),
             pa.ensure_grad().data(), true);
      if (pb.requires_grad)
        gemm(true, false, k, n, m, pa.val.data(), nd.grad.data(),
             pb.ensure_grad().data(), true);
    });
  }
  if (av.rank() == 3 && bv.rank() == 3) {
    int B = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    if (bv.dim(0) != B || bv.dim(1) != k)
      throw ShapeError("matmul: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    Tensor out({B, m, n});
    for (int bi = 0; bi < B; ++bi)
      gemm(false, false, m, n, k,
           av.data() + static_cast<std::size_t>(bi) * m * k,
           bv.data() + static_cast<std::size_t>(bi) * k * n,
           out.data() + static_cast<std::size_t>(bi) * m * n, false);
    return t.make(std::move(out), {a, b}, [B, m, n, k](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      for (int bi = 0; bi < B; ++bi) {
        const double* dg = nd.grad.data() + static_cast<std::size_t>(bi) * m * n;
        if (pa.requires_grad)
          gemm(false, true, m, k, n, dg,
               pb.val.data() + static_cast<std::size_t>(bi) * k * n,
               pa.ensure_grad().data() + static_cast<std::size_t>(bi) * m * k,
               true);
        if (pb.requires_grad)
          gemm(true, false, k, n, m,
               pa.val.data() + static_cast<std::size_t>(bi) * m * k, dg,
               pb.ensure_grad().data() + static_cast<std::size_t>(bi) * k * n,
               true);
      }
    });
  }
  throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                   shape_str(b.shape()));
}

inline Var transpose_last2(Tape& t, const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("transpose_last2: rank < 2");
  Shape s = xv.shape();
  int r = xv.rank();
  std::swap(s[static_cast<std::size_t>(r - 2)], s[static_cast<std::size_t>(r - 1)]);
  int rows = xv.dim(r - 2), cols = xv.dim(r - 1);
  std::size_t mat = static_cast<std::size_t>(rows) * cols;
  std::size_t batches = xv.size() / mat;
  Tensor out(s);
  for (std::size_t b = 0; b < batches; ++b)
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        out[b * mat + static_cast<std::size_t>(j) * rows + i] =
            xv[b * mat + static_cast<std::size_t>(i) * cols + j];
  return t.make(std::move(out), {x}, [rows, cols, mat, batches](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < batches; ++b)
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
          g[b * mat + static_cast<std::size_t>(i) * cols + j] +=
              n.grad[b * mat + static_cast<std::size_t>(j) * rows + i];
  });
}

// elementwise helpers ------------------------------------------------------

inline Var unary(Tape& t, const Var& a, double (*f)(double),
                 double (*df)(double)) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
  return t.make(std::move(out), {a}, [df](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += n.grad[i] * df(n.parents[0]->val[i]);
  });
}

inline Var relu(Tape& t, const Var& a) {
  return unary(
      t, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh_op(Tape& t, const Var& a) {
  return unary(
      t, a, [](double x) { return std::tanh(x); },
      [](double x) {
        double y = std::tanh(x);
        return 1.0 - y * y;
      });
}

inline Var sigmoid(Tape& t, const Var& a) {
  return unary(
      t, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        double y = 1.0 / (1.0 + std::exp(-x));
        return y * (1.0 - y);
      });
}

// exact erf-based GELU: x * Phi(x)
inline Var gelu(Tape& t, const Var& a) {
  return unary(
      t, a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x) {
        double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return phi + x * pdf;
      });
}

inline Var softplus(Tape& t, const Var& a) {
  return unary(
      t, a,
      [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

inline Var exp_op(Tape& t, const Var& a) {
  return unary(
      t, a, [](double x) { return std::exp(x); },
      [](double x) { return std::exp(x); });
}

inline Var log_op(Tape& t, const Var& a) {
  return unary(
      t, a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

// reductions over the last axis ------------------------------------------

inline Var softmax_last(Tape& t, const Var& x) {
  const Tensor& xv = x.value();
  int n = xv.dim(xv.rank() - 1);
  std::size_t rows = xv.size() / static_cast<std::size_t>(n);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = xv.data() + r * n;
    double* oi = out.data() + r * n;
    double mx = *std::max_element(xi, xi + n);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      oi[j] = std::exp(xi[j] - mx);
      sum += oi[j];
    }
    for (int j = 0; j < n; ++j) oi[j] /= sum;
  }
  return t.make(std::move(out), {x}, [n, rows](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = nd.val.data() + r * n;
      const double* dy = nd.grad.data() + r * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (int j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

inline Var log_softmax_last(Tape& t, const Var& x) {
  const Tensor& xv = x.value();
  int n = xv.dim(xv.rank() - 1);
  std::size_t rows = xv.size() / static_cast<std::size_t>(n);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = xv.data() + r * n;
    double* oi = out.data() + r * n;
    double mx = *std::max_element(xi, xi + n);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
    double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) oi[j] = xi[j] - lse;
  }
  return t.make(std::move(out), {x}, [n, rows](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = nd.val.data() + r * n;
      const double* dy = nd.grad.data() + r * n;
      double tot = 0.0;
      for (int j = 0; j < n; ++j) tot += dy[j];
      for (int j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * tot;
    }
  });
}

// keeps the last axis with extent 1
inline Var logsumexp_last(Tape& t, const Var& x) {
  const Tensor& xv = x.value();
  int n = xv.dim(xv.rank() - 1);
  std::size_t rows = xv.size() / static_cast<std::size_t>(n);
  Shape s = xv.shape();
  s.back() = 1;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = xv.data() + r * n;
    double mx = *std::max_element(xi, xi + n);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(xi[j] - mx);
    out[r] = mx + std::log(sum);
  }
  return t.make(std::move(out), {x}, [n, rows](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xi = nd.parents[0]->val.data() + r * n;
      double lse = nd.val[r];
      double dy = nd.grad[r];
      for (int j = 0; j < n; ++j) g[r * n + j] += dy * std::exp(xi[j] - lse);
    }
  });
}

inline Var layernorm_last(Tape& t, const Var& x, const Var& gamma,
                          const Var& beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  int n = xv.dim(xv.rank() - 1);
  if (static_cast<int>(gamma.value().size()) != n ||
      static_cast<int>(beta.value().size()) != n)
    throw ShapeError("layernorm_last: affine params do not match last axis");
  std::size_t rows = xv.size() / static_cast<std::size_t>(n);
  Tensor out(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = xv.data() + r * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xi[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= n;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < n; ++j) {
      double xh = (xi[j] - mean) * is;
      (*xhat)[r * n + j] = xh;
      out[r * n + j] = gamma.value()[static_cast<std::size_t>(j)] * xh +
                       beta.value()[static_cast<std::size_t>(j)];
    }
  }
  return t.make(std::move(out), {x, gamma, beta},
                [n, rows, xhat, inv_std](Node& nd) {
    Node& px = *nd.parents[0];
    Node& pg = *nd.parents[1];
    Node& pb = *nd.parents[2];
    const Tensor& gv = pg.val;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = nd.grad.data() + r * n;
      const double* xh = xhat->data() + r * n;
      if (pg.requires_grad) {
        Tensor& gg = pg.ensure_grad();
        for (int j = 0; j < n; ++j) gg[static_cast<std::size_t>(j)] += dy[j] * xh[j];
      }
      if (pb.requires_grad) {
        Tensor& gb = pb.ensure_grad();
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += dy[j];
      }
      if (px.requires_grad) {
        Tensor& gx = px.ensure_grad();
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < n; ++j) {
          double gdy = gv[static_cast<std::size_t>(j)] * dy[j];
          m1 += gdy;
          m2 += gdy * xh[j];
        }
        m1 /= n;
        m2 /= n;
        double is = (*inv_std)[r];
        for (int j = 0; j < n; ++j) {
          double gdy = gv[static_cast<std::size_t>(j)] * dy[j];
          gx[r * n + j] += is * (gdy - m1 - xh[j] * m2);
        }
      }
    }
  });
}

inline Var dropout(Tape& t, const Var& x, double rate, Rng& rng,
                   bool training) {
  if (!training || rate <= 0.0) return x;
  double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    (*mask)[i] = m;
    out[i] = x.value()[i] * m;
  }
  return t.make(std::move(out), {x}, [mask](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (*mask)[i];
  });
}

// structural ops -----------------------------------------------------------

inline Var reshape(Tape& t, const Var& x, Shape shape) {
  if (Tensor::count(shape) != static_cast<long long>(x.value().size()))
    throw ShapeError("reshape: element count mismatch " +
                     shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out = x.value();
  Tensor reshaped = Tensor::from(shape, std::vector<double>(
                                            out.data(), out.data() + out.size()));
  return t.make(std::move(reshaped), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Var slice_last(Tape& t, const Var& x, int off, int len) {
  const Tensor& xv = x.value();
  int n = xv.dim(xv.rank() - 1);
  if (off < 0 || len <= 0 || off + len > n)
    throw ShapeError("slice_last: bad range");
  Shape s = xv.shape();
  s.back() = len;
  std::size_t rows = xv.size() / static_cast<std::size_t>(n);
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (int j = 0; j < len; ++j)
      out[r * len + j] = xv[r * n + off + j];
  return t.make(std::move(out), {x}, [n, off, len, rows](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r)
      for (int j = 0; j < len; ++j)
        g[r * n + off + j] += nd.grad[r * len + j];
  });
}

inline Var concat_last(Tape& t, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != bv.rank()) throw ShapeError("concat_last: rank mismatch");
  for (int i = 0; i + 1 < av.rank(); ++i)
    if (av.dim(i) != bv.dim(i)) throw ShapeError("concat_last: shape mismatch");
  int na = av.dim(av.rank() - 1), nb = bv.dim(bv.rank() - 1);
  Shape s = av.shape();
  s.back() = na + nb;
  std::size_t rows = av.size() / static_cast<std::size_t>(na);
  Tensor out(s);
  int n = na + nb;
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < na; ++j) out[r * n + j] = av[r * na + j];
    for (int j = 0; j < nb; ++j) out[r * n + na + j] = bv[r * nb + j];
  }
  return t.make(std::move(out), {a, b}, [na, nb, n, rows](Node& nd) {
    Node& pa = *nd.parents[0];
    Node& pb = *nd.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < na; ++j) g[r * na + j] += nd.grad[r * n + j];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < nb; ++j) g[r * nb + j] += nd.grad[r * n + na + j];
    }
  });
}

inline Var concat_last(Tape& t, const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_last: empty input");
  Var out = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) out = concat_last(t, out, xs[i]);
  return out;
}

// concatenate rank-3 tensors along axis 1
inline Var concat_axis1(Tape& t, const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != bv.dim(2))
    throw ShapeError("concat_axis1: shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  int B = av.dim(0), Ta = av.dim(1), Tb = bv.dim(1), S = av.dim(2);
  Tensor out({B, Ta + Tb, S});
  for (int bi = 0; bi < B; ++bi) {
    std::memcpy(out.data() + static_cast<std::size_t>(bi) * (Ta + Tb) * S,
                av.data() + static_cast<std::size_t>(bi) * Ta * S,
                sizeof(double) * static_cast<std::size_t>(Ta) * S);
    std::memcpy(out.data() + static_cast<std::size_t>(bi) * (Ta + Tb) * S +
                    static_cast<std::size_t>(Ta) * S,
                bv.data() + static_cast<std::size_t>(bi) * Tb * S,
                sizeof(double) * static_cast<std::size_t>(Tb) * S);
  }
  return t.make(std::move(out), {a, b}, [B, Ta, Tb, S](Node& nd) {
    Node& pa = *nd.parents[0];
    Node& pb = *nd.parents[1];
    for (int bi = 0; bi < B; ++bi) {
      const double* dg = nd.grad.data() + static_cast<std::size_t>(bi) * (Ta + Tb) * S;
      if (pa.requires_grad) {
        double* g = pa.ensure_grad().data() + static_cast<std::size_t>(bi) * Ta * S;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Ta) * S; ++i)
          g[i] += dg[i];
      }
      if (pb.requires_grad) {
        double* g = pb.ensure_grad().data() + static_cast<std::size_t>(bi) * Tb * S;
        for (std::size_t i = 0; i < static_cast<std::size_t>(Tb) * S; ++i)
          g[i] += dg[static_cast<std::size_t>(Ta) * S + i];
      }
    }
  });
}

// pick index t1 along axis 1 of a rank-3 tensor: (B,T,S) -> (B,S)
inline Var time_slice(Tape& t, const Var& x, int t1) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || t1 < 0 || t1 >= xv.dim(1))
    throw ShapeError("time_slice: bad index for " + shape_str(x.shape()));
  int B = xv.dim(0), T = xv.dim(1), S = xv.dim(2);
  Tensor out({B, S});
  for (int b = 0; b < B; ++b)
    std::memcpy(out.data() + static_cast<std::size_t>(b) * S,
                xv.data() + (static_cast<std::size_t>(b) * T + t1) * S,
                sizeof(double) * static_cast<std::size_t>(S));
  return t.make(std::move(out), {x}, [B, T, S, t1](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < S; ++j)
        g[(static_cast<std::size_t>(b) * T + t1) * S + j] +=
            nd.grad[static_cast<std::size_t>(b) * S + j];
  });
}

// embedding lookup: rows of table (R,S) gathered by constant indices
inline Var gather_rows(Tape& t, const Var& table, std::vector<int> idx) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("gather_rows: table must be rank 2");
  int R = tv.dim(0), S = tv.dim(1);
  for (int i : idx)
    if (i < 0 || i >= R)
      throw DataError("gather_rows: index " + std::to_string(i) +
                      " out of range [0," + std::to_string(R) + ")");
  int N = static_cast<int>(idx.size());
  Tensor out({N, S});
  for (int i = 0; i < N; ++i)
    std::memcpy(out.data() + static_cast<std::size_t>(i) * S,
                tv.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * S,
                sizeof(double) * static_cast<std::size_t>(S));
  auto ids = std::make_shared<std::vector<int>>(std::move(idx));
  return t.make(std::move(out), {table}, [ids, S](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < ids->size(); ++i)
      for (int j = 0; j < S; ++j)
        g[static_cast<std::size_t>((*ids)[i]) * S + j] += nd.grad[i * S + j];
  });
}

// repeat a (B,1,V) tensor L times along axis 1
inline Var tile_axis1(Tape& t, const Var& x, int L) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || xv.dim(1) != 1)
    throw ShapeError("tile_axis1: expects (B,1,V)");
  int B = xv.dim(0), V = xv.dim(2);
  Tensor out({B, L, V});
  for (int b = 0; b < B; ++b)
    for (int l = 0; l < L; ++l)
      std::memcpy(out.data() + (static_cast<std::size_t>(b) * L + l) * V,
                  xv.data() + static_cast<std::size_t>(b) * V,
                  sizeof(double) * static_cast<std::size_t>(V));
  return t.make(std::move(out), {x}, [B, L, V](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l)
        for (int j = 0; j < V; ++j)
          g[static_cast<std::size_t>(b) * V + j] +=
              nd.grad[(static_cast<std::size_t>(b) * L + l) * V + j];
  });
}

inline Var sum_all(Tape& t, const Var& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.value().size(); ++i) s += x.value()[i];
  return t.make(Tensor::scalar(s), {x}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
  });
}

inline Var mean_all(Tape& t, const Var& x) {
  return scale(t, sum_all(t, x), 1.0 / static_cast<double>(x.value().size()));
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

// Runs fn() once to collect analytic gradients (fn must build a fresh graph,
// call backward, and leave gradients in the store), then probes sampled
// coordinates with central differences. Returns the max relative error.
inline double finite_diff_check(const std::function<double()>& fn,
                                ParamStore& store, double epsilon = 1e-5,
                                std::size_t max_coords_per_param = 24,
                                std::uint64_t seed = 7) {
  store.zero_grads();
  (void)fn();
  std::unordered_map<std::string, Tensor> analytic;
  for (const auto& name : store.names()) analytic[name] = store.grad(name);

  Rng rng(seed);
  double max_rel = 0.0;
  for (const auto& name : store.names()) {
    Tensor& p = store.get(name);
    std::size_t n = p.size();
    std::vector<std::size_t> coords;
    if (n <= max_coords_per_param) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t c = 0; c < max_coords_per_param; ++c)
        coords.push_back(rng.next_below(n));
    }
    for (std::size_t i : coords) {
      double orig = p[i];
      p[i] = orig + epsilon;
      store.zero_grads();
      double up = fn();
      p[i] = orig - epsilon;
      store.zero_grads();
      double dn = fn();
      p[i] = orig;
      double numeric = (up - dn) / (2.0 * epsilon);
      // scale floor keeps central-difference roundoff (~1e-11) from
      // masquerading as relative error on near-zero gradients
      double scale = std::max({std::fabs(analytic[name][i]),
                               std::fabs(numeric), 1e-6});
      double rel = std::fabs(analytic[name][i] - numeric) / scale;
      max_rel = std::max(max_rel, rel);
    }
  }
  store.zero_grads();
  return max_rel;
}

}  // namespace owdf::diff
