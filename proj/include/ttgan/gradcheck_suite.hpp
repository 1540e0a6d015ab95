#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ttgan/autodiff.hpp"

namespace ttgan {

/// One case per tape primitive (named as primitive_name) plus "batch_norm_eval".
std::vector<std::string> primitive_check_names();
/// Composite layers: ttlinear, ttconv, ttconv_contraction, gsp, dense_block,
/// transition, generator_stage, generator_output_stage, classifier.
std::vector<std::string> layer_check_names();

/// Seeded case with fixed inputs; the loss contracts the output with a fixed
/// random tensor. Throws ArgumentError for unregistered names.
ad::GradCheckCase make_check_case(std::string_view name);

/// Tolerance on GradCheckReport::max_error for a pass.
inline constexpr double kGradCheckTolerance = 1e-4;

}  // namespace ttgan
