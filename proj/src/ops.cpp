#include "dal/ops.hpp"

#include "dal/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace dal {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) +
                         " vs " + shape_string(b.rows(), b.cols()));
  }
}

void require_row(const Tensor& a, const Tensor& row, const char* op) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError(std::string(op) + ": row vector " + shape_string(row.rows(), row.cols()) +
                         " does not broadcast over " + shape_string(a.rows(), a.cols()));
  }
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

// c = a b
// da = dc b^T
// db = a^T dc
Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.rows(), a.cols()) + " x " +
                         shape_string(b.rows(), b.cols()));
  }
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& a = parent(n, 0);
    Node& b = parent(n, 1);
    if (a.requires_grad) a.accumulate_expr(n.grad * b.value.transpose());
    if (b.requires_grad) b.accumulate_expr(a.value.transpose() * n.grad);
  });
}

// c = a b^T
// da = dc b
// db = dc^T a
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner extents disagree " + shape_string(a.rows(), a.cols()) +
                         " x " + shape_string(b.rows(), b.cols()) + "^T");
  }
  Matrix out = a.value() * b.value().transpose();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& a = parent(n, 0);
    Node& b = parent(n, 1);
    if (a.requires_grad) a.accumulate_expr(n.grad * b.value);
    if (b.requires_grad) b.accumulate_expr(n.grad.transpose() * a.value);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return make_result(std::move(out), {a}, [](Node& n) {
    parent(n, 0).accumulate_expr(n.grad.transpose());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate_expr(-n.grad);
  });
}

// c = a * b (elementwise)
// da = dc * b
// db = dc * a
Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& a = parent(n, 0);
    Node& b = parent(n, 1);
    if (a.requires_grad) a.accumulate_expr(n.grad.cwiseProduct(b.value));
    if (b.requires_grad) b.accumulate_expr(n.grad.cwiseProduct(a.value));
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  return make_result(std::move(out), {a}, [s](Node& n) { parent(n, 0).accumulate_expr(n.grad * s); });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_row(a, row, "add_row");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate_expr(n.grad.colwise().sum());
  });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  require_row(a, row, "mul_row");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return make_result(std::move(out), {a, row}, [](Node& n) {
    Node& a = parent(n, 0);
    Node& r = parent(n, 1);
    if (a.requires_grad) {
      Matrix g = n.grad.array().rowwise() * r.value.row(0).array();
      a.accumulate(g);
    }
    if (r.requires_grad) r.accumulate_expr(n.grad.cwiseProduct(a.value).colwise().sum());
  });
}

// y = x Phi(x)
// dy/dx = Phi(x) + x phi(x)
Tensor gelu(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out = v.unaryExpr([](double t) { return 0.5 * t * (1.0 + std::erf(t / std::numbers::sqrt2)); });
  return make_result(std::move(out), {x}, [](Node& n) {
    Node& x = parent(n, 0);
    Matrix d = x.value.unaryExpr([](double t) {
      const double cdf = 0.5 * (1.0 + std::erf(t / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + t * pdf;
    });
    x.accumulate_expr(n.grad.cwiseProduct(d));
  });
}

// y = softmax(x) per row
// dx = y * (dy - <dy, y>)
Tensor softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < v.cols(); ++c) {
      if (v(r, c) > kMaskThreshold) mx = std::max(mx, v(r, c));
    }
    if (!std::isfinite(mx)) {
      throw DegenerateRowError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (Index c = 0; c < v.cols(); ++c) {
      const double e = v(r, c) > kMaskThreshold ? std::exp(v(r, c) - mx) : 0.0;
      out(r, c) = e;
      z += e;
    }
    out.row(r) /= z;
  }
  return make_result(out, {x}, [y = out](Node& n) {
    const Eigen::VectorXd dot = n.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = y.cwiseProduct(n.grad.colwise() - dot);
    parent(n, 0).accumulate(g);
  });
}

// y = x - logsumexp(x) per row
// dx = dy - softmax(x) * sum(dy)
Tensor log_softmax_rows(const Tensor& x) {
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  Matrix prob(v.rows(), v.cols());
  for (Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    const double lse = mx + std::log((v.row(r).array() - mx).exp().sum());
    out.row(r) = v.row(r).array() - lse;
    prob.row(r) = out.row(r).array().exp();
  }
  return make_result(std::move(out), {x}, [prob = std::move(prob)](Node& n) {
    const Eigen::VectorXd total = n.grad.rowwise().sum();
    Matrix g = n.grad - (prob.array().colwise() * total.array()).matrix();
    parent(n, 0).accumulate(g);
  });
}

// y = gain * xhat + bias, xhat = (x - mean) / sqrt(var + eps)
// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_row(x, gain, "layer_norm gain");
  require_row(x, bias, "layer_norm bias");
  if (x.cols() < 2) throw DimensionError("layer_norm: needs at least 2 features, got " + std::to_string(x.cols()));
  const Matrix& v = x.value();
  const auto d = static_cast<double>(v.cols());
  Matrix xhat(v.rows(), v.cols());
  Eigen::VectorXd rstd(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().sum() / d;
    const double denom = std::sqrt(var + eps);
    rstd(r) = denom > 0.0 ? 1.0 / denom : 0.0;
    xhat.row(r) = (v.row(r).array() - mu) * rstd(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return make_result(std::move(out), {x, gain, bias},
                     [xhat = std::move(xhat), rstd = std::move(rstd), d](Node& n) {
                       Node& x = parent(n, 0);
                       Node& gain = parent(n, 1);
                       Node& bias = parent(n, 2);
                       if (x.requires_grad) {
                         Matrix dxhat = n.grad.array().rowwise() * gain.value.row(0).array();
                         const Eigen::VectorXd m1 = dxhat.rowwise().sum() / d;
                         const Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / d;
                         Matrix dx = dxhat;
                         dx.colwise() -= m1;
                         dx -= (xhat.array().colwise() * m2.array()).matrix();
                         dx = dx.array().colwise() * rstd.array();
                         x.accumulate(dx);
                       }
                       if (gain.requires_grad) gain.accumulate_expr(n.grad.cwiseProduct(xhat).colwise().sum());
                       if (bias.requires_grad) bias.accumulate_expr(n.grad.colwise().sum());
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const Index> indices) {
  const Matrix& t = table.value();
  std::vector<Index> idx(indices.begin(), indices.end());
  Matrix out(static_cast<Index>(idx.size()), t.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= t.rows()) {
      throw BoundsError("gather_rows: index " + std::to_string(idx[r]) + " at position " + std::to_string(r) +
                        " outside [0, " + std::to_string(t.rows()) + ")");
    }
    out.row(static_cast<Index>(r)) = t.row(idx[r]);
  }
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& n) {
    Node& table = parent(n, 0);
    Matrix g = Matrix::Zero(table.value.rows(), table.value.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) g.row(idx[r]) += n.grad.row(static_cast<Index>(r));
    table.accumulate(g);
  });
}

Tensor gather_along_rows(const Tensor& x, const IndexMatrix& indices) {
  const Matrix& v = x.value();
  if (indices.rows() != v.rows()) {
    throw DimensionError("gather_along_rows: index rows " + std::to_string(indices.rows()) + " vs source " +
                         shape_string(v.rows(), v.cols()));
  }
  Matrix out(indices.rows(), indices.cols());
  for (Index i = 0; i < indices.rows(); ++i) {
    for (Index j = 0; j < indices.cols(); ++j) {
      const Index c = indices(i, j);
      if (c < 0 || c >= v.cols()) {
        throw BoundsError("gather_along_rows: index " + std::to_string(c) + " at (" + std::to_string(i) + ", " +
                          std::to_string(j) + ") outside [0, " + std::to_string(v.cols()) + ")");
      }
      out(i, j) = v(i, c);
    }
  }
  return make_result(std::move(out), {x}, [indices](Node& n) {
    Node& x = parent(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    for (Index i = 0; i < indices.rows(); ++i) {
      for (Index j = 0; j < indices.cols(); ++j) g(i, indices(i, j)) += n.grad(i, j);
    }
    x.accumulate(g);
  });
}

Tensor pick(const Tensor& x, std::span<const Index> rows, std::span<const Index> cols) {
  if (rows.size() != cols.size()) throw DimensionError("pick: row and column index lists differ in length");
  const Matrix& v = x.value();
  std::vector<Index> rs(rows.begin(), rows.end());
  std::vector<Index> cs(cols.begin(), cols.end());
  Matrix out(static_cast<Index>(rs.size()), 1);
  for (std::size_t k = 0; k < rs.size(); ++k) {
    if (rs[k] < 0 || rs[k] >= v.rows() || cs[k] < 0 || cs[k] >= v.cols()) {
      throw BoundsError("pick: (" + std::to_string(rs[k]) + ", " + std::to_string(cs[k]) + ") outside " +
                        shape_string(v.rows(), v.cols()));
    }
    out(static_cast<Index>(k), 0) = v(rs[k], cs[k]);
  }
  return make_result(std::move(out), {x}, [rs = std::move(rs), cs = std::move(cs)](Node& n) {
    Node& x = parent(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    for (std::size_t k = 0; k < rs.size(); ++k) g(rs[k], cs[k]) += n.grad(static_cast<Index>(k), 0);
    x.accumulate(g);
  });
}

Tensor col_slice(const Tensor& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw BoundsError("col_slice: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                      ") outside " + shape_string(x.rows(), x.cols()));
  }
  Matrix out = x.value().middleCols(start, count);
  return make_result(std::move(out), {x}, [start, count](Node& n) {
    Node& x = parent(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    g.middleCols(start, count) = n.grad;
    x.accumulate(g);
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(p.rows(), p.cols()) + " vs " +
                           shape_string(parts[0].rows(), parts[0].cols()));
    }
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(std::move(out), inputs, [offsets = std::move(offsets)](Node& n) {
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.accumulate_expr(n.grad.middleCols(offsets[i], p.value.cols()));
    }
  });
}

Tensor reshape(const Tensor& x, Index rows, Index cols) {
  if (rows * cols != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.rows(), x.cols()) + " as " +
                         shape_string(rows, cols));
  }
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  return make_result(std::move(out), {x}, [](Node& n) {
    Node& x = parent(n, 0);
    Matrix g = Eigen::Map<const Matrix>(n.grad.data(), x.value.rows(), x.value.cols());
    x.accumulate(g);
  });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "rowwise_dot");
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& a = parent(n, 0);
    Node& b = parent(n, 1);
    if (a.requires_grad) a.accumulate_expr((b.value.array().colwise() * n.grad.col(0).array()).matrix());
    if (b.requires_grad) b.accumulate_expr((a.value.array().colwise() * n.grad.col(0).array()).matrix());
  });
}

Tensor sum(const Tensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return make_result(std::move(out), {x}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate_expr(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : 0.0;
  return hadamard(x, Tensor::constant(std::move(mask)));
}

}  // namespace dal
