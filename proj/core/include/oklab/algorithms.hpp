#pragma once

#include <optional>
#include <string_view>

namespace oklab {

/** The six allreduce flavors the lab can run. */
enum class Algorithm {
  dense = 0,
  topka,
  topkdsa,
  gtopk,
  gaussiank,
  oktopk,
};

inline constexpr int kAlgorithmCount = 6;

/** Canonical lowercase name (the CLI string). */
const char* algorithm_name(Algorithm a);

/** Parses a canonical name; std::nullopt for anything else. */
std::optional<Algorithm> algorithm_from_name(std::string_view name);

}  // namespace oklab
