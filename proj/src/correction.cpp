#include "obc/correction.hpp"

#include <algorithm>
#include <cmath>

#include "obc/error.hpp"

namespace obc {

ChannelStats collect_stats(const Matrix& outputs) {
  if (outputs.cols() < 2) throw InvalidArgument("statistics need at least 2 samples per channel");
  const Eigen::Index c = outputs.rows();
  const auto n = static_cast<double>(outputs.cols());
  ChannelStats s{Vector(c), Vector(c)};
  for (Eigen::Index i = 0; i < c; ++i) {
    const double mean = outputs.row(i).sum() / n;
    const double var = (outputs.row(i).array() - mean).square().sum() / n;
    s.mean(i) = mean;
    s.std(i) = std::max(std::sqrt(var), kStdFloor);
  }
  return s;
}

namespace {

void check_channels(Eigen::Index c, const ChannelStats& dense, const ChannelStats& comp) {
  if (dense.channels() != c || comp.channels() != c || dense.std.size() != c || comp.std.size() != c)
    throw InvalidArgument("channel counts of outputs and statistics differ");
}

}  // namespace

Matrix apply_correction(const Matrix& outputs, const ChannelStats& dense, const ChannelStats& comp,
                        CorrectionForm form) {
  check_channels(outputs.rows(), dense, comp);
  Matrix out(outputs.rows(), outputs.cols());
  for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
    const double ratio = dense.std(i) / comp.std(i);
    if (form == CorrectionForm::paper)
      out.row(i) = ratio * (outputs.row(i).array() - comp.mean(i) + dense.mean(i));
    else
      out.row(i) = ratio * (outputs.row(i).array() - comp.mean(i)) + dense.mean(i);
  }
  return out;
}

ChannelAffine merge_affine(const ChannelStats& dense, const ChannelStats& comp, const ChannelAffine& affine,
                           CorrectionForm form) {
  const Eigen::Index c = affine.scale.size();
  if (affine.shift.size() != c) throw InvalidArgument("affine scale and shift sizes differ");
  check_channels(c, dense, comp);
  ChannelAffine out{Vector(c), Vector(c)};
  for (Eigen::Index i = 0; i < c; ++i) {
    const double ratio = dense.std(i) / comp.std(i);
    out.scale(i) = affine.scale(i) * ratio;
    if (form == CorrectionForm::paper)
      out.shift(i) = affine.scale(i) * ratio * (dense.mean(i) - comp.mean(i)) + affine.shift(i);
    else
      out.shift(i) = affine.scale(i) * (dense.mean(i) - ratio * comp.mean(i)) + affine.shift(i);
  }
  return out;
}

}  // namespace obc
