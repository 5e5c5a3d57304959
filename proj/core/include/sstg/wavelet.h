#pragma once

#include <string>
#include <vector>

namespace sstg::preprocess {

// Orthonormal wavelet filter pair. lowpass holds the scaling coefficients h
// (sum h = sqrt(2), sum h^2 = 1); highpass is the QMF g[k] = (-1)^k h[M-1-k].
struct WaveletFilter {
  std::string name;
  std::vector<double> lowpass;
  std::vector<double> highpass;
};

// Known families: haar (alias db1), db2, db4. Throws on anything else.
const WaveletFilter& wavelet_filter(const std::string& name);

// One periodized analysis step: approx[m] = sum_k h[k] x[(2m+k) mod n],
// detail likewise with g. n must be even and >= filter length.
void wavelet_analysis_step(const std::vector<double>& input, const WaveletFilter& filter,
                           std::vector<double>& approx, std::vector<double>& detail);

// Exact inverse of the analysis step.
std::vector<double> wavelet_synthesis_step(const std::vector<double>& approx,
                                           const std::vector<double>& detail,
                                           const WaveletFilter& filter);

// Full wavelet-packet tree to the given depth over a length-n signal
// (n divisible by 2^depth). Bands are returned in natural (Paley) order:
// the children of band b at each level are 2b (lowpass) and 2b+1 (highpass).
std::vector<std::vector<double>> wavelet_packet_decompose(const std::vector<double>& input,
                                                          int depth,
                                                          const WaveletFilter& filter);

std::vector<double> wavelet_packet_reconstruct(const std::vector<std::vector<double>>& bands,
                                               const WaveletFilter& filter);

} // namespace sstg::preprocess
