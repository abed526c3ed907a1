#pragma once

#include <filesystem>
#include <string>

#include <Eigen/Core>

namespace obc {

// Dense row-major 64-bit matrix. Every module works on this type.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// A single layer-wise compression instance: weights W (d_row x d_col) and
// calibration inputs X (d_col x N). The objective is ||WX - What X||^2.
class LayerProblem {
 public:
  LayerProblem(Matrix weights, Matrix inputs, std::string name = {});

  const Matrix& weights() const { return weights_; }
  const Matrix& inputs() const { return inputs_; }
  const std::string& name() const { return name_; }

  Eigen::Index rows() const { return weights_.rows(); }
  Eigen::Index cols() const { return weights_.cols(); }
  Eigen::Index samples() const { return inputs_.cols(); }

 private:
  Matrix weights_;
  Matrix inputs_;
  std::string name_;
};

// Reads a 2-D NPY (v1.0 or v2.0) array of little-endian float32/float64 in
// C order. float32 data is widened. Throws FormatError on anything else,
// including non-finite elements.
Matrix load_matrix(const std::filesystem::path& path);

// Writes NPY v1.0, '<f8', C order.
void save_matrix(const Matrix& m, const std::filesystem::path& path);

// Byte-level codec used by load/save; exposed for tests.
Matrix decode_npy(const std::string& bytes);
std::string encode_npy(const Matrix& m);

bool all_finite(const Matrix& m);

}  // namespace obc
