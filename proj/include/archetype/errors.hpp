#pragma once

#include <stdexcept>
#include <string>

namespace archetype {

// Error vocabulary shared by all modules. Each type corresponds to one failure
// mode a caller can act on; everything else is a plain logic_error.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RankDeficient : Error {
  using Error::Error;
};
struct Infeasible : Error {
  using Error::Error;
};
struct BadProbabilities : Error {
  using Error::Error;
};
struct ShapeMismatch : Error {
  using Error::Error;
};
struct SolverFailure : Error {
  using Error::Error;
};
struct NoConvergence : Error {
  double residual;
  explicit NoConvergence(const std::string& msg, double res)
      : Error(msg), residual(res) {}
};
struct EmptyCube : Error {
  using Error::Error;
};
struct TooLarge : Error {
  using Error::Error;
};
struct PreconditionFailed : Error {
  using Error::Error;
};
struct SingularDesign : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};

}  // namespace archetype
