#include "sftts/tensor.hpp"

#include <cblas.h>

#include <sstream>

namespace sftts {

static void check_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2) throw ShapeError(std::string(who) + ": expected 2-D tensor");
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = trans_a ? a.cols() : a.rows();
  const int k = trans_a ? a.rows() : a.cols();
  const int kb = trans_b ? b.cols() : b.rows();
  const int n = trans_b ? b.rows() : b.cols();
  if (k != kb) throw ShapeError("matmul: inner dimensions differ");
  Tensor c = Tensor::uninit({m, n});
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a.data(), a.cols(), b.data(),
              b.cols(), 0.0, c.data(), c.cols());
  return c;
}

void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b,
                double alpha) {
  const int m = trans_a ? a.cols() : a.rows();
  const int k = trans_a ? a.rows() : a.cols();
  const int n = trans_b ? b.rows() : b.cols();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a.data(), a.cols(), b.data(),
              b.cols(), 1.0, c.data(), c.cols());
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  Tensor t = Tensor::uninit({a.cols(), a.rows()});
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) t.at(c, r) = a.at(r, c);
  return t;
}

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (int i = 0; i < t.ndim(); ++i) os << (i ? "x" : "") << t.dim(i);
  os << "]";
  return os.str();
}

}  // namespace sftts
