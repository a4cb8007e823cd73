#pragma once

#include <complex>
#include <string>
#include <vector>

#include "restl/trial.hpp"

namespace restl {

struct PreprocConfig {
    double band_lo = 0.5;
    double band_hi = 40.0;
    double target_fs = 250.0;
    double rs_start = 0.0, rs_end = 3.0;  // seconds
    double ts_start = 3.0, ts_end = 6.0;

    void validate() const;
};

// Cascaded biquads (second-order sections), direct form II transposed.
struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0;  // numerator
    double a1 = 0, a2 = 0;          // denominator (a0 normalized to 1)
};

struct SosFilter {
    std::vector<Biquad> sections;

    // Magnitude of the single-pass response at frequency f (Hz).
    double magnitude(double f, double fs) const;
    // Zero-phase (forward-backward) magnitude: |H|^2.
    double filtfilt_magnitude(double f, double fs) const { return magnitude(f, fs) * magnitude(f, fs); }
};

// Butterworth designs via bilinear transform; `order` is the analog prototype
// order (bandpass therefore has 2*order poles). Even orders only.
SosFilter design_butter_bandpass(int order, double lo, double hi, double fs);
SosFilter design_butter_lowpass(int order, double cutoff, double fs);

// Forward-backward filtering with odd-reflection padding and step-matched
// initial conditions, applied per channel.
std::vector<float> sosfiltfilt(const SosFilter& f, const std::vector<float>& x);

// Per-operation entry points.
Trial bandpass(const Trial& t, double lo, double hi);
Trial resample(const Trial& t, double target_fs);
Trial standardize(const Trial& t, std::vector<std::string>* warnings = nullptr);
std::pair<Trial, Trial> epoch(const Trial& t, const PreprocConfig& cfg = {});

// Full pipeline for one recording: resample -> bandpass -> window -> standardize.
// Labeled trials yield {RS epoch, TS epoch}; RS recordings yield {RS epoch}.
std::vector<Trial> preprocess_trial(const Trial& t, const PreprocConfig& cfg,
                                    std::vector<std::string>* warnings = nullptr);
std::vector<Trial> preprocess_all(const std::vector<Trial>& trials, const PreprocConfig& cfg,
                                  std::vector<std::string>* warnings = nullptr);

}  // namespace restl
