#pragma once

// Clip segmentation for frame-level feature sequences.

#include "cvqa/types.hpp"

#include <string>

namespace cvqa::visual {

// Frames per clip when L frames are split into n_clips equal clips; trailing
// frames that do not fill a clip are dropped.
inline int clip_length(Eigen::Index frames, int n_clips) {
  CVQA_REQUIRE(n_clips >= 1, ValidationError, "clip count must be positive");
  CVQA_REQUIRE(frames >= n_clips, ValidationError,
               "cannot segment " + std::to_string(frames) + " frames into " +
                   std::to_string(n_clips) + " clips");
  return static_cast<int>(frames / n_clips);
}

// Rows 0..n*t-1 of the result are the kept frames in order: clip c covers
// rows [c*t, (c+1)*t).
template <class S>
MatX<S> segment_clips(const MatX<S>& frames, int n_clips) {
  const int t = clip_length(frames.rows(), n_clips);
  return frames.topRows(static_cast<Eigen::Index>(n_clips) * t);
}

}  // namespace cvqa::visual
