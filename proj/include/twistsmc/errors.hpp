#pragma once

#include <stdexcept>
#include <string>

namespace twistsmc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BadConfig : Error { using Error::Error; };
struct BadInput : Error { using Error::Error; };
struct BadStep : Error { using Error::Error; };
struct BadParameterization : Error { using Error::Error; };
struct HorizonExceeded : Error { using Error::Error; };
struct MissingObservation : Error { using Error::Error; };
struct DegenerateWeights : Error { using Error::Error; };
struct Unsupported : Error { using Error::Error; };
struct Exhausted : Error { using Error::Error; };
struct TooLarge : Error { using Error::Error; };

}  // namespace twistsmc
