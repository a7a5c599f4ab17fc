#include "oklab/algorithms.hpp"

namespace oklab {

const char* algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::dense: return "dense";
    case Algorithm::topka: return "topka";
    case Algorithm::topkdsa: return "topkdsa";
    case Algorithm::gtopk: return "gtopk";
    case Algorithm::gaussiank: return "gaussiank";
    case Algorithm::oktopk: return "oktopk";
  }
  return "unknown";
}

std::optional<Algorithm> algorithm_from_name(std::string_view name) {
  for (int i = 0; i < kAlgorithmCount; ++i) {
    Algorithm a = static_cast<Algorithm>(i);
    if (name == algorithm_name(a)) return a;
  }
  return std::nullopt;
}

}  // namespace oklab
