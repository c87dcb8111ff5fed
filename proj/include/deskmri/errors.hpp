#pragma once

#include <stdexcept>
#include <string>

namespace deskmri {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// config -> 2, dependency -> 3, numeric/statistics -> 4, everything else -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct FactorizationError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct DatasetError : Error {
  using Error::Error;
};
struct DegenerateInputError : Error {
  using Error::Error;
};
struct StatisticsError : Error {
  using Error::Error;
};
struct DependencyError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

}  // namespace deskmri
