#ifndef POLCO_PARAM_VECTOR_HPP_
#define POLCO_PARAM_VECTOR_HPP_

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace polco {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Flat parameter storage with a named segment table.
class ParamVector {
 public:
  struct Segment {
    std::string name;
    Eigen::Index offset = 0;
    Eigen::Index length = 0;
    friend bool operator==(const Segment&, const Segment&) = default;
  };

  ParamVector() = default;

  /// Appends a zero-initialized segment and returns its offset.
  Eigen::Index add_segment(const std::string& name, Eigen::Index length) {
    for (const auto& s : segments_)
      if (s.name == name) throw std::invalid_argument("duplicate segment '" + name + "'");
    const Eigen::Index offset = values_.size();
    segments_.push_back({name, offset, length});
    values_.conservativeResize(offset + length);
    values_.segment(offset, length).setZero();
    return offset;
  }

  const Segment& segment_info(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return s;
    throw std::out_of_range("no segment '" + name + "'");
  }

  bool has_segment(const std::string& name) const {
    for (const auto& s : segments_)
      if (s.name == name) return true;
    return false;
  }

  auto segment(const std::string& name) {
    const auto& s = segment_info(name);
    return values_.segment(s.offset, s.length);
  }
  auto segment(const std::string& name) const {
    const auto& s = segment_info(name);
    return values_.segment(s.offset, s.length);
  }

  /// Row-major view of a segment as a rows x cols matrix.
  auto matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto& s = segment_info(name);
    if (rows * cols != s.length) throw std::invalid_argument("segment '" + name + "' shape mismatch");
    return Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values_.data() + s.offset, rows, cols);
  }
  auto matrix(const std::string& name, Eigen::Index rows, Eigen::Index cols) const {
    const auto& s = segment_info(name);
    if (rows * cols != s.length) throw std::invalid_argument("segment '" + name + "' shape mismatch");
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values_.data() + s.offset, rows, cols);
  }

  Vector& values() { return values_; }
  const Vector& values() const { return values_; }
  Eigen::Index size() const { return values_.size(); }
  const std::vector<Segment>& segments() const { return segments_; }

  bool all_finite() const { return values_.allFinite(); }

  /// Same layout, zero values.
  ParamVector zeros_like() const {
    ParamVector out = *this;
    out.values_.setZero();
    return out;
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.segments_ == b.segments_ && a.values_.size() == b.values_.size() &&
           (a.values_.array() == b.values_.array()).all();
  }

 private:
  Vector values_;
  std::vector<Segment> segments_;
};

}  // namespace polco

#endif  // POLCO_PARAM_VECTOR_HPP_
