#pragma once

#include "msvad/numcore/matrix.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace msvad {

struct DerBreakdown {
  long n_miss = 0;
  long n_fa = 0;
  long n_confusion = 0;
  long n_total = 0;  // reference speech frames summed over channels
  double der = 0.0;
};

namespace detail {
inline void check_binary_pair(const Matrix& ref, const Matrix& hyp) {
  check_shape(ref.same_shape(hyp) && ref.cols == 2, "der: T x 2 matrices required");
}
}  // namespace detail

/// Frame-level diarization error rate with fixed channel identities (the
/// main/background roles are supervised, so there is no permutation search,
/// no collar, and no forgiveness window).
inline DerBreakdown der(const Matrix& reference, const Matrix& hypothesis) {
  detail::check_binary_pair(reference, hypothesis);
  DerBreakdown out;
  for (int t = 0; t < reference.rows; ++t) {
    int rc = 0, hc = 0, correct = 0;
    for (int c = 0; c < 2; ++c) {
      const bool r = reference.at(t, c) != 0.0;
      const bool h = hypothesis.at(t, c) != 0.0;
      rc += r;
      hc += h;
      correct += (r && h);
    }
    out.n_miss += std::max(0, rc - hc);
    out.n_fa += std::max(0, hc - rc);
    out.n_confusion += std::min(rc, hc) - correct;
    out.n_total += rc;
  }
  if (out.n_total == 0) throw std::invalid_argument("der: no reference speech (undefined)");
  out.der = static_cast<double>(out.n_miss + out.n_fa + out.n_confusion) /
            static_cast<double>(out.n_total);
  return out;
}

/// Main-speaker DER: column 0 only; confusion is structurally zero.
inline double der_main(const Matrix& reference, const Matrix& hypothesis) {
  detail::check_binary_pair(reference, hypothesis);
  long miss = 0, fa = 0, total = 0;
  for (int t = 0; t < reference.rows; ++t) {
    const bool r = reference.at(t, 0) != 0.0;
    const bool h = hypothesis.at(t, 0) != 0.0;
    miss += (r && !h);
    fa += (!r && h);
    total += r;
  }
  if (total == 0) throw std::invalid_argument("der_main: no main-speaker reference frames");
  return static_cast<double>(miss + fa) / static_cast<double>(total);
}

/// Pooled-counts variant used for scoring a whole evaluation set.
inline double der_main_pooled(const std::vector<Matrix>& refs,
                              const std::vector<Matrix>& hyps) {
  if (refs.size() != hyps.size() || refs.empty())
    throw std::invalid_argument("der_main_pooled: size mismatch");
  long miss = 0, fa = 0, total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    detail::check_binary_pair(refs[i], hyps[i]);
    for (int t = 0; t < refs[i].rows; ++t) {
      const bool r = refs[i].at(t, 0) != 0.0;
      const bool h = hyps[i].at(t, 0) != 0.0;
      miss += (r && !h);
      fa += (!r && h);
      total += r;
    }
  }
  if (total == 0) throw std::invalid_argument("der_main_pooled: no reference frames");
  return static_cast<double>(miss + fa) / static_cast<double>(total);
}

inline DerBreakdown der_pooled(const std::vector<Matrix>& refs,
                               const std::vector<Matrix>& hyps) {
  if (refs.size() != hyps.size() || refs.empty())
    throw std::invalid_argument("der_pooled: size mismatch");
  DerBreakdown out;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    detail::check_binary_pair(refs[i], hyps[i]);
    for (int t = 0; t < refs[i].rows; ++t) {
      int rc = 0, hc = 0, correct = 0;
      for (int c = 0; c < 2; ++c) {
        const bool r = refs[i].at(t, c) != 0.0;
        const bool h = hyps[i].at(t, c) != 0.0;
        rc += r;
        hc += h;
        correct += (r && h);
      }
      out.n_miss += std::max(0, rc - hc);
      out.n_fa += std::max(0, hc - rc);
      out.n_confusion += std::min(rc, hc) - correct;
      out.n_total += rc;
    }
  }
  if (out.n_total == 0) throw std::invalid_argument("der_pooled: no reference speech");
  out.der = static_cast<double>(out.n_miss + out.n_fa + out.n_confusion) /
            static_cast<double>(out.n_total);
  return out;
}

/// Main-channel F1 of one sample. An all-inactive reference matched by an
/// all-inactive hypothesis counts as perfect agreement (F1 = 1).
inline double f1_main(const Matrix& reference, const Matrix& hypothesis) {
  detail::check_binary_pair(reference, hypothesis);
  long tp = 0, fp = 0, fn = 0;
  for (int t = 0; t < reference.rows; ++t) {
    const bool r = reference.at(t, 0) != 0.0;
    const bool h = hypothesis.at(t, 0) != 0.0;
    tp += (r && h);
    fp += (!r && h);
    fn += (r && !h);
  }
  if (tp == 0) return (fp == 0 && fn == 0) ? 1.0 : 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

/// Macro F1: per-sample main-channel F1, averaged with equal sample weight.
inline double macro_f1(const std::vector<std::pair<Matrix, Matrix>>& samples) {
  if (samples.empty()) throw std::invalid_argument("macro_f1: empty sample list");
  double acc = 0.0;
  for (const auto& [ref, hyp] : samples) acc += f1_main(ref, hyp);
  return acc / static_cast<double>(samples.size());
}

/// 1 iff p >= threshold.
inline Matrix binarize(const Matrix& probs, double threshold) {
  Matrix out(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.d.size(); ++i)
    out.d[i] = probs.d[i] >= threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace msvad
