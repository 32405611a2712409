#pragma once

#include <span>
#include <vector>

namespace psm {

/// Corner-aligned bilinear resampling of a rows x cols grid whose cells hold
/// `channels` interleaved values (layout [row][col][channel]). Output corners
/// coincide with input corners; a size-1 output axis samples the input's
/// centre line.
std::vector<double> bilinear_resize(std::span<const double> src, int rows, int cols, int channels, int out_rows,
                                    int out_cols);

}  // namespace psm
