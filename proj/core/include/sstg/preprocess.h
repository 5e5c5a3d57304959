#pragma once

#include <string>
#include <vector>

#include "sstg/tensor.h"

namespace sstg::preprocess {

inline constexpr int kSegmentLength = 512;

// Tri-axial acceleration recording, [node][axis][time] with axis-major layout
// inside each node block.
struct RawRecording {
  int nodes = 0;
  int t_raw = 0;
  double sample_rate_hz = 0.0;
  std::vector<double> samples; // nodes * 3 * t_raw

  double& at(int node, int axis, int t) {
    return samples[(static_cast<size_t>(node) * 3 + axis) * t_raw + t];
  }
  double at(int node, int axis, int t) const {
    return samples[(static_cast<size_t>(node) * 3 + axis) * t_raw + t];
  }
};

RawRecording make_recording(int nodes, int t_raw, double sample_rate_hz);
void validate_recording(const RawRecording& rec);

// One 512-sample single-axis window, max-abs normalized across all channels.
struct SignalSegment {
  int nodes = 0;
  int segment_index = 0;
  double norm_scale = 1.0; // the divisor that was applied
  bool degenerate = false; // all-zero segment, divisor clamped to 1
  std::vector<double> samples; // nodes * kSegmentLength

  double& at(int node, int t) { return samples[static_cast<size_t>(node) * kSegmentLength + t]; }
  double at(int node, int t) const {
    return samples[static_cast<size_t>(node) * kSegmentLength + t];
  }
};

// Wavelet-packet coefficients, [node][band][step] with band*steps == 512.
struct SpectroTemporalTensor {
  Tensor coeffs; // [N, F, T]
  std::string wavelet;
  int depth = 0;
  int segment_index = 0;
  double norm_scale = 1.0;
};

// Zero-phase (forward-backward) Butterworth high-pass, 4th order per pass.
RawRecording highpass_filter(const RawRecording& rec, double cutoff_hz);

// Magnitude response of one forward-backward pass at frequency hz; the
// independent reference for the filter tests.
double highpass_filtfilt_gain(double hz, double cutoff_hz, double sample_rate_hz);

// Fuses the three axes into one signal: per frequency bin the output magnitude
// is sqrt(|X|^2 + |Y|^2 + |Z|^2) and the phase is the phase of X + Y + Z.
// Returns [node][time], nodes * t_raw.
std::vector<double> dft321(const RawRecording& rec);

std::vector<SignalSegment> segment_and_normalize(const std::vector<double>& series, int nodes,
                                                 int t_raw);

SpectroTemporalTensor wpt_decompose(const SignalSegment& seg, int depth,
                                    const std::string& wavelet);
SignalSegment wpt_reconstruct(const SpectroTemporalTensor& x);

struct PreprocessOptions {
  double cutoff_hz = 10.0;
  std::string wavelet = "db4";
  int depth = 4;
};

// highpass -> dft321 -> segment/normalize -> wavelet packets.
std::vector<SpectroTemporalTensor> preprocess_recording(const RawRecording& rec,
                                                        const PreprocessOptions& opts);

} // namespace sstg::preprocess
