#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dm3d/autodiff.hpp"

namespace dm3d {

struct GradReport {
  std::string op;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t worst_index = -1;
  double fd_step = 0.0;  // the sweep step that achieved max_rel_err

  bool passes(double tol) const { return max_rel_err < tol; }
};

using ScalarFn = std::function<double(const std::vector<double>&)>;

/// |a - f| / max(|a|, |f|, 1e-12).
double relative_error(double analytic, double fd);

/// Central differences, one call pair per coordinate.
std::vector<double> fd_gradient(const ScalarFn& f, const std::vector<double>& x,
                                double step);

/// Default step sweep 1e-4 .. 1e-8; truncation and roundoff trade off in a
/// V-shaped error curve, and each coordinate keeps its best step — the
/// reported error is the worst coordinate's minimum over the sweep.
const std::vector<double>& default_fd_steps();

/// Compares an analytic gradient against the FD oracle across the sweep.
/// Evaluations where both |analytic| and |fd| fall below `noise_floor` count
/// as agreement: such parameters have no measurable influence on the loss
/// (e.g. bias components that cancel exactly in a real-part extraction), so
/// both sides are pure roundoff and their ratio says nothing about the
/// backward pass. The exemption is per evaluation, not per coordinate — a
/// gradient sitting just under the floor still passes via the steps that
/// reproduce it, no matter what the noisier steps report. A floor of 0
/// disables the exemption.
GradReport compare_gradients(const std::string& op, const ScalarFn& f,
                             const std::vector<double>& x,
                             const std::vector<double>& analytic,
                             const std::vector<double>& steps = default_fd_steps(),
                             double noise_floor = 0.0);

// -- bridges between flat FD vectors and tape parameters --

std::vector<double> flatten_values(const std::vector<ad::Var*>& vars);
void assign_values(const std::vector<ad::Var*>& vars,
                   const std::vector<double>& flat);
std::vector<double> flatten_grads(const std::vector<ad::Var*>& vars);
void clear_grads(const std::vector<ad::Var*>& vars);

/// End-to-end check of a tape-built scalar loss against FD over the given
/// parameters: runs forward+backward once for the analytic gradient, then
/// re-evaluates the loss (grad mode off) across the FD sweep.
GradReport check_tape_gradient(const std::string& op,
                               const std::vector<ad::Var*>& params,
                               const std::function<ad::Var()>& loss_fn,
                               const std::vector<double>& steps = default_fd_steps(),
                               double noise_floor = 0.0);

}  // namespace dm3d
