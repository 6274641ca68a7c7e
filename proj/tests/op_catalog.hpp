// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "bdlm/autograd.hpp"

namespace oracle {

using DVec = std::vector<double>;
using DFn = std::function<DVec(const std::vector<DVec>&)>;
using VFn = std::function<bdlm::Var(const std::vector<bdlm::Var>&)>;

struct OpCase {
  std::string name;
  std::vector<bdlm::Shape> shapes;
  VFn op;
  DFn reference;  // double-precision forward of the same op, flat output
  std::function<float(std::mt19937_64&, size_t input)> init;  // null = uniform(-1, 1)
  uint64_t seed = 0;
};

struct OpCheck {
  std::string name;
  bool shape_ok = false;
  double forward_rel_err = 0.0;            // max |y - ref| / max(|ref|, 1)
  std::vector<double> grad_rel_err;        // per input, L2 relative to the FD gradient
};

/// Forward against the double reference, then the tape gradient of sum(c * op(x))
/// against central differences (h = 1e-3) of the reference.
OpCheck check_op(const OpCase& oc);

/// Every differentiable op of the tape with a double-precision reference.
std::vector<OpCase> op_catalog();

DVec matmul(const DVec& a, const DVec& b, int64_t n, int64_t k, int64_t m);
double gelu(double x);
DVec log_softmax(const double* row, int64_t n);
DVec attention(const DVec& q, const DVec& k, const DVec& v, int64_t nq, int64_t nk, int64_t d, int64_t heads,
               const std::function<bool(int64_t, int64_t)>& visible);

}  // namespace oracle
