#include "obc/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include "obc/error.hpp"

namespace obc {

static_assert(std::endian::native == std::endian::little,
              "NPY codec assumes a little-endian host");

LayerProblem::LayerProblem(Matrix weights, Matrix inputs, std::string name)
    : weights_(std::move(weights)), inputs_(std::move(inputs)), name_(std::move(name)) {
  if (weights_.cols() != inputs_.rows()) {
    std::ostringstream msg;
    msg << "layer problem shape mismatch: weights are " << weights_.rows() << "x"
        << weights_.cols() << " but inputs have " << inputs_.rows() << " rows";
    throw InvalidArgument(msg.str());
  }
  if (inputs_.cols() < 1) throw InvalidArgument("layer problem needs at least one sample");
  if (weights_.rows() < 1 || weights_.cols() < 1)
    throw InvalidArgument("layer problem has an empty weight matrix");
}

bool all_finite(const Matrix& m) {
  const double* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\n\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\n\r");
  return s.substr(first, last - first + 1);
}

// Returns the raw text of the value stored under `key` in the header dict.
std::string header_value(const std::string& header, const std::string& key) {
  const std::string quoted[] = {"'" + key + "'", "\"" + key + "\""};
  std::size_t pos = std::string::npos;
  for (const auto& q : quoted) {
    pos = header.find(q);
    if (pos != std::string::npos) {
      pos += q.size();
      break;
    }
  }
  if (pos == std::string::npos) throw FormatError("malformed NPY header: missing key '" + key + "'");
  pos = header.find(':', pos);
  if (pos == std::string::npos) throw FormatError("malformed NPY header: no value for '" + key + "'");
  ++pos;
  std::size_t end = pos;
  if (key == "shape") {
    const auto open = header.find('(', pos);
    const auto close = header.find(')', pos);
    if (open == std::string::npos || close == std::string::npos || close < open)
      throw FormatError("malformed NPY header: bad shape tuple");
    return header.substr(open, close - open + 1);
  }
  while (end < header.size() && header[end] != ',' && header[end] != '}') ++end;
  return trim(header.substr(pos, end - pos));
}

std::vector<long long> parse_shape(const std::string& tuple) {
  std::vector<long long> dims;
  std::string inner = tuple.substr(1, tuple.size() - 2);
  std::stringstream ss(inner);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      throw FormatError("malformed NPY header: bad shape entry '" + item + "'");
    }
    if (used != item.size() || v < 0) throw FormatError("malformed NPY header: bad shape entry '" + item + "'");
    dims.push_back(v);
  }
  return dims;
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && (s.front() == '\'' || s.front() == '"') && s.back() == s.front())
    return s.substr(1, s.size() - 2);
  throw FormatError("malformed NPY header: expected a quoted string, got " + s);
}

}  // namespace

Matrix decode_npy(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 4 || bytes.compare(0, kMagicLen, kMagic, kMagicLen) != 0)
    throw FormatError("malformed NPY header: bad magic");
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
    offset = 10;
  } else if (major == 2) {
    if (bytes.size() < 12) throw FormatError("malformed NPY header: truncated");
    for (int i = 0; i < 4; ++i)
      header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    offset = 12;
  } else {
    throw FormatError("malformed NPY header: unsupported version " + std::to_string(major));
  }
  if (bytes.size() < offset + header_len) throw FormatError("malformed NPY header: truncated");
  const std::string header = bytes.substr(offset, header_len);
  offset += header_len;

  const std::string descr = unquote(header_value(header, "descr"));
  const std::string fortran = header_value(header, "fortran_order");
  const auto dims = parse_shape(header_value(header, "shape"));

  std::size_t item = 0;
  if (descr == "<f8" || descr == "=f8") {
    item = 8;
  } else if (descr == "<f4" || descr == "=f4") {
    item = 4;
  } else {
    throw FormatError("unsupported dtype '" + descr + "' (expected little-endian float32/float64)");
  }
  if (fortran != "False") throw FormatError("unsupported NPY layout: only C order is accepted");
  if (dims.size() != 2)
    throw FormatError("expected a 2-D array, got " + std::to_string(dims.size()) + "-D");

  const auto rows = static_cast<Eigen::Index>(dims[0]);
  const auto cols = static_cast<Eigen::Index>(dims[1]);
  const std::size_t count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  if (bytes.size() - offset != count * item)
    throw FormatError("NPY payload size does not match shape (" + std::to_string(bytes.size() - offset) +
                      " bytes for " + std::to_string(count) + " elements)");

  Matrix m(rows, cols);
  const char* src = bytes.data() + offset;
  if (item == 8) {
    std::memcpy(m.data(), src, count * 8);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      float f;
      std::memcpy(&f, src + 4 * i, 4);
      m.data()[i] = static_cast<double>(f);
    }
  }
  if (!all_finite(m)) throw FormatError("NPY array contains NaN or Inf elements");
  return m;
}

std::string encode_npy(const Matrix& m) {
  std::ostringstream dict;
  dict << "{'descr': '<f8', 'fortran_order': False, 'shape': (" << m.rows() << ", " << m.cols()
       << "), }";
  std::string header = dict.str();
  // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64.
  const std::size_t unpadded = kMagicLen + 4 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::string out(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header.size() & 0xff));
  out.push_back(static_cast<char>((header.size() >> 8) & 0xff));
  out += header;
  out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  return out;
}

Matrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  try {
    return decode_npy(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_matrix(const Matrix& m, const std::filesystem::path& path) {
  const std::string bytes = encode_npy(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace obc
