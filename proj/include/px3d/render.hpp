#pragma once

#include <string>

#include "px3d/grid.hpp"

namespace px3d {

/// Axes of an unfolded (H, W, D) volume.
enum class RenderAxis { height = 0, width = 1, depth = 2 };

RenderAxis parse_render_axis(const std::string& s);

/// Per-ray maximum along `axis`, min-max normalized to [0,1].
Image render_mip(const Volume& v, RenderAxis axis);

/// Binarizes at 1.5 x mean and shades the first occupied index k along
/// `axis` as 1 - k / n; rays that hit nothing are 0.
Image render_threshold(const Volume& v, RenderAxis axis = RenderAxis::depth);

}  // namespace px3d
