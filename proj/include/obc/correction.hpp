#pragma once

#include <vector>

#include "obc/tensor_io.hpp"

namespace obc {

inline constexpr double kStdFloor = 1e-6;

// Per-channel mean and population standard deviation (floored at 1e-6).
struct ChannelStats {
  Vector mean;
  Vector std;

  Eigen::Index channels() const { return mean.size(); }
};

// `paper`:    Y = (sd/sc) * (X - mc + md)
// `textbook`: Y = (sd/sc) * (X - mc) + md
enum class CorrectionForm { paper, textbook };

// outputs: channels x samples, samples >= 2.
ChannelStats collect_stats(const Matrix& outputs);

Matrix apply_correction(const Matrix& outputs, const ChannelStats& dense, const ChannelStats& comp,
                        CorrectionForm form = CorrectionForm::paper);

struct ChannelAffine {
  Vector scale;
  Vector shift;
};

// Folds the correction into a following per-channel affine map, so that
// scale' * x + shift' == scale * correct(x) + shift.
ChannelAffine merge_affine(const ChannelStats& dense, const ChannelStats& comp, const ChannelAffine& affine,
                           CorrectionForm form = CorrectionForm::paper);

}  // namespace obc
