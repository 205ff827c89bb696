#pragma once

// Linear centered kernel alignment between layer activations.
//
//   K = X X^T, L = Y Y^T, H = I - (1/m) 1 1^T
//   HSIC(K, L) = <HKH, HLH>_F / (m - 1)^2
//   CKA(X, Y)  = HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bimtdp/model.hpp"
#include "bimtdp/synth.hpp"

namespace bimtdp {

/// m samples x p flattened neurons.
using ActivationMatrix = Eigen::MatrixXd;

/// Raised when a representation has (numerically) zero self-HSIC.
struct DegenerateActivations : std::domain_error {
  using std::domain_error::domain_error;
};

Eigen::MatrixXd gram(const ActivationMatrix& x);
double hsic(const Eigen::MatrixXd& k, const Eigen::MatrixXd& l);
double cka(const ActivationMatrix& x, const ActivationMatrix& y);

struct CKAMatrix {
  std::vector<std::string> names;
  /// Row-major L x L; empty optionals mark pairs involving a degenerate tap.
  std::vector<std::optional<double>> scores;

  std::size_t size() const { return names.size(); }
  const std::optional<double>& at(std::size_t i, std::size_t j) const { return scores[i * names.size() + j]; }
};

/// Pairwise CKA of pre-collected activations.
CKAMatrix cka_matrix(const std::vector<std::string>& names,
                     const std::vector<ActivationMatrix>& activations);

/// Eval-mode activations of the first m samples at each tap, one row per sample.
std::vector<ActivationMatrix> collect_activations(const Model& model, const Dataset& ds,
                                                  const std::vector<std::string>& taps,
                                                  std::size_t m, std::size_t batch = 16);

CKAMatrix cka_heatmap(const Model& model, const Dataset& ds, const std::vector<std::string>& taps,
                      std::size_t m = 128);

/// Header row and column hold tap names; missing entries are left empty.
std::string cka_csv(const CKAMatrix& mat);

}  // namespace bimtdp
