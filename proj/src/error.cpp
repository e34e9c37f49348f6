#include "dcopf/error.hpp"

#include <sstream>
#include <utility>

namespace dcopf {

namespace {

std::string infeasible_message(InfeasibleLoadError::Direction direction, double total,
                               double limit) {
  std::ostringstream os;
  os.precision(10);
  if (direction == InfeasibleLoadError::Direction::kBelowMinimum) {
    os << "total load " << total << " MW is below the sum of generator minimums " << limit
       << " MW";
  } else {
    os << "total load " << total << " MW exceeds the sum of generator maximums " << limit
       << " MW";
  }
  return os.str();
}

}  // namespace

InfeasibleLoadError::InfeasibleLoadError(Direction direction, double total_load, double limit)
    : Error(infeasible_message(direction, total_load, limit)),
      direction_(direction),
      total_load_(total_load),
      limit_(limit) {}

NonFiniteError::NonFiniteError(std::string term, const std::string& detail)
    : Error("non-finite value in '" + term + "': " + detail), term_(std::move(term)) {}

ParseError::ParseError(std::string path, std::size_t line, const std::string& detail)
    : Error(path + ":" + std::to_string(line) + ": " + detail),
      path_(std::move(path)),
      line_(line) {}

}  // namespace dcopf
