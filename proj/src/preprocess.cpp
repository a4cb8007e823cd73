#include "restl/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace restl {

namespace {

constexpr double kPi = 3.14159265358979323846;

using cd = std::complex<double>;

// Analog Butterworth prototype poles (left half-plane, unit cutoff).
std::vector<cd> butter_prototype(int order) {
    std::vector<cd> poles;
    for (int k = 0; k < order; ++k) {
        double theta = kPi * (2.0 * k + 1.0) / (2.0 * order) + kPi / 2.0;
        poles.emplace_back(std::cos(theta), std::sin(theta));
    }
    return poles;
}

cd bilinear_map(cd s, double fs2) { return (fs2 + s) / (fs2 - s); }

// Builds one biquad from a conjugate pole pair and two real zeros.
Biquad biquad_from(cd pole, double z0, double z1) {
    Biquad q;
    q.a1 = -2.0 * pole.real();
    q.a2 = std::norm(pole);
    q.b0 = 1.0;
    q.b1 = -(z0 + z1);
    q.b2 = z0 * z1;
    return q;
}

}  // namespace

void PreprocConfig::validate() const {
    if (!(band_lo > 0.0 && band_lo < band_hi)) config_error("preproc: need 0 < band_lo < band_hi");
    if (!(band_hi < target_fs / 2.0)) config_error("preproc: band_hi must be below Nyquist of target_fs");
    if (!(rs_start < rs_end && ts_start < ts_end)) config_error("preproc: windows must have positive length");
    if (rs_end > ts_start && ts_end > rs_start && !(rs_end <= ts_start || ts_end <= rs_start))
        config_error("preproc: RS and TS windows overlap");
}

double SosFilter::magnitude(double f, double fs) const {
    cd z = std::polar(1.0, 2.0 * kPi * f / fs);
    cd zi1 = 1.0 / z, zi2 = zi1 * zi1;
    cd h(1.0, 0.0);
    for (const auto& s : sections) {
        h *= (s.b0 + s.b1 * zi1 + s.b2 * zi2) / (1.0 + s.a1 * zi1 + s.a2 * zi2);
    }
    return std::abs(h);
}

SosFilter design_butter_bandpass(int order, double lo, double hi, double fs) {
    if (order < 2 || order % 2 != 0) config_error("bandpass design: order must be even and >= 2");
    if (!(lo > 0.0 && lo < hi)) config_error("bandpass design: need 0 < lo < hi");
    if (!(hi < fs / 2.0)) config_error("bandpass design: hi edge " + std::to_string(hi) +
                                       " Hz is at or above Nyquist (" + std::to_string(fs / 2.0) + " Hz)");

    const double fs2 = 2.0 * fs;
    const double w1 = fs2 * std::tan(kPi * lo / fs);
    const double w2 = fs2 * std::tan(kPi * hi / fs);
    const double bw = w2 - w1;
    const double w0sq = w1 * w2;

    // Lowpass prototype -> bandpass: each pole p maps to the two roots of
    // s^2 - p*bw*s + w0^2 = 0. Analog zeros: `order` at s=0.
    std::vector<cd> apoles;
    for (cd p : butter_prototype(order)) {
        cd pb = p * (bw / 2.0);
        cd disc = std::sqrt(pb * pb - cd(w0sq, 0.0));
        apoles.push_back(pb + disc);
        apoles.push_back(pb - disc);
    }

    // Digital gain: k_a * Re(prod(fs2 - z_a) / prod(fs2 - p_a)) with
    // k_a = bw^order and analog zeros all at 0.
    cd num(1.0, 0.0), den(1.0, 0.0);
    for (int i = 0; i < order; ++i) num *= cd(fs2, 0.0);
    for (const cd& p : apoles) den *= (cd(fs2, 0.0) - p);
    double k = std::pow(bw, order) * (num / den).real();

    // Keep one pole of each conjugate pair, most selective (slowest) first so
    // the gain-carrying first section sees the flattest response.
    std::vector<cd> dpoles;
    for (const cd& p : apoles) {
        cd zp = bilinear_map(p, fs2);
        if (zp.imag() > 0.0) dpoles.push_back(zp);
    }
    if (static_cast<int>(dpoles.size()) != order)
        numeric_error("bandpass design: degenerate pole layout (band too narrow for fs)");
    std::sort(dpoles.begin(), dpoles.end(), [](const cd& a, const cd& b) { return std::abs(a) > std::abs(b); });

    // Digital zeros: `order` at z=+1 and `order` at z=-1; one of each per section.
    SosFilter f;
    for (const cd& p : dpoles) f.sections.push_back(biquad_from(p, 1.0, -1.0));
    f.sections.front().b0 *= k;
    f.sections.front().b1 *= k;
    f.sections.front().b2 *= k;
    return f;
}

SosFilter design_butter_lowpass(int order, double cutoff, double fs) {
    if (order < 2 || order % 2 != 0) config_error("lowpass design: order must be even and >= 2");
    if (!(cutoff > 0.0 && cutoff < fs / 2.0)) config_error("lowpass design: cutoff must be in (0, Nyquist)");

    const double fs2 = 2.0 * fs;
    const double wc = fs2 * std::tan(kPi * cutoff / fs);

    std::vector<cd> apoles;
    for (cd p : butter_prototype(order)) apoles.push_back(p * wc);

    cd den(1.0, 0.0);
    for (const cd& p : apoles) den *= (cd(fs2, 0.0) - p);
    double k = std::pow(wc, order) * (cd(1.0, 0.0) / den).real();

    std::vector<cd> dpoles;
    for (const cd& p : apoles) {
        cd zp = bilinear_map(p, fs2);
        if (zp.imag() > 0.0) dpoles.push_back(zp);
    }
    if (static_cast<int>(dpoles.size()) != order / 2)
        numeric_error("lowpass design: degenerate pole layout");
    std::sort(dpoles.begin(), dpoles.end(), [](const cd& a, const cd& b) { return std::abs(a) > std::abs(b); });

    SosFilter f;
    for (const cd& p : dpoles) f.sections.push_back(biquad_from(p, -1.0, -1.0));
    f.sections.front().b0 *= k;
    f.sections.front().b1 *= k;
    f.sections.front().b2 *= k;
    return f;
}

namespace {

// Steady-state DF2T state per section for a unit step input.
void sos_step_state(const SosFilter& f, std::vector<double>& z1, std::vector<double>& z2) {
    size_t n = f.sections.size();
    z1.assign(n, 0.0);
    z2.assign(n, 0.0);
    double scale = 1.0;
    for (size_t i = 0; i < n; ++i) {
        const Biquad& s = f.sections[i];
        double h1 = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        double y = h1 * scale;
        z2[i] = s.b2 * scale - s.a2 * y;
        z1[i] = s.b1 * scale - s.a1 * y + z2[i];
        scale = y;
    }
}

void sosfilt_inplace(const SosFilter& f, std::vector<double>& x, const std::vector<double>& zi1,
                     const std::vector<double>& zi2, double zi_scale) {
    size_t nsec = f.sections.size();
    std::vector<double> z1(nsec), z2(nsec);
    for (size_t i = 0; i < nsec; ++i) {
        z1[i] = zi1[i] * zi_scale;
        z2[i] = zi2[i] * zi_scale;
    }
    for (double& v : x) {
        double xin = v;
        for (size_t i = 0; i < nsec; ++i) {
            const Biquad& s = f.sections[i];
            double y = s.b0 * xin + z1[i];
            z1[i] = s.b1 * xin - s.a1 * y + z2[i];
            z2[i] = s.b2 * xin - s.a2 * y;
            xin = y;
        }
        v = xin;
    }
}

}  // namespace

std::vector<float> sosfiltfilt(const SosFilter& f, const std::vector<float>& x) {
    const size_t T = x.size();
    const size_t nominal = 3 * (2 * f.sections.size() + 1);
    if (T <= nominal)
        data_error("sosfiltfilt: signal of length " + std::to_string(T) + " too short for filter warm-up (need > " +
                   std::to_string(nominal) + " samples)");
    const size_t pad = nominal;

    // Odd reflection at both ends.
    std::vector<double> ext(T + 2 * pad);
    for (size_t i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
    for (size_t i = 0; i < T; ++i) ext[pad + i] = x[i];
    for (size_t i = 0; i < pad; ++i) ext[pad + T + i] = 2.0 * x[T - 1] - x[T - 2 - i];

    std::vector<double> zi1, zi2;
    sos_step_state(f, zi1, zi2);

    sosfilt_inplace(f, ext, zi1, zi2, ext.front());
    std::reverse(ext.begin(), ext.end());
    sosfilt_inplace(f, ext, zi1, zi2, ext.front());
    std::reverse(ext.begin(), ext.end());

    std::vector<float> out(T);
    for (size_t i = 0; i < T; ++i) out[i] = static_cast<float>(ext[pad + i]);
    return out;
}

Trial bandpass(const Trial& t, double lo, double hi) {
    SosFilter f = design_butter_bandpass(4, lo, hi, t.fs);
    Trial out = t;
    std::vector<float> row(t.samples);
    for (int c = 0; c < t.channels; ++c) {
        std::copy_n(t.data.begin() + static_cast<size_t>(c) * t.samples, t.samples, row.begin());
        auto filtered = sosfiltfilt(f, row);
        std::copy(filtered.begin(), filtered.end(), out.data.begin() + static_cast<size_t>(c) * t.samples);
    }
    return out;
}

Trial resample(const Trial& t, double target_fs) {
    if (!(target_fs > 0.0)) config_error("resample: target_fs must be positive");
    double ratio = t.fs / target_fs;
    double rounded = std::round(ratio);
    if (std::abs(ratio - rounded) > 1e-9 || rounded < 1.0)
        config_error("resample: fs " + std::to_string(t.fs) + " is not an integer multiple of target " +
                     std::to_string(target_fs));
    int factor = static_cast<int>(rounded);
    if (factor == 1) return t;

    SosFilter aa = design_butter_lowpass(8, 0.8 * (target_fs / 2.0), t.fs);
    Trial out;
    out.id = t.id;
    out.subject = t.subject;
    out.session = t.session;
    out.kind = t.kind;
    out.label = t.label;
    out.fs = target_fs;
    out.channels = t.channels;
    out.samples = (t.samples + factor - 1) / factor;
    out.data.resize(static_cast<size_t>(out.channels) * out.samples);

    std::vector<float> row(t.samples);
    for (int c = 0; c < t.channels; ++c) {
        std::copy_n(t.data.begin() + static_cast<size_t>(c) * t.samples, t.samples, row.begin());
        auto filtered = sosfiltfilt(aa, row);
        for (int i = 0; i < out.samples; ++i) out.at(c, i) = filtered[static_cast<size_t>(i) * factor];
    }
    return out;
}

Trial standardize(const Trial& t, std::vector<std::string>* warnings) {
    Trial out = t;
    for (int c = 0; c < t.channels; ++c) {
        const float* src = t.data.data() + static_cast<size_t>(c) * t.samples;
        double mean = 0.0;
        for (int i = 0; i < t.samples; ++i) mean += src[i];
        mean /= t.samples;
        double var = 0.0;
        for (int i = 0; i < t.samples; ++i) {
            double d = src[i] - mean;
            var += d * d;
        }
        var /= t.samples;  // population variance
        double sd = std::sqrt(var);
        if (sd < 1e-12) {
            sd += 1e-8;
            if (warnings)
                warnings->push_back("standardize: constant channel " + std::to_string(c) + " in trial '" + t.id + "'");
        }
        float* dst = out.data.data() + static_cast<size_t>(c) * t.samples;
        for (int i = 0; i < t.samples; ++i) dst[i] = static_cast<float>((src[i] - mean) / sd);
    }
    return out;
}

std::pair<Trial, Trial> epoch(const Trial& t, const PreprocConfig& cfg) {
    int need = static_cast<int>(std::llround(cfg.ts_end * t.fs));
    if (t.samples < need)
        data_error("epoch: trial '" + t.id + "' has " + std::to_string(t.samples) + " samples, needs >= " +
                   std::to_string(need));
    if (!t.label.has_value()) data_error("epoch: trial '" + t.id + "' has no label; cannot form a TS epoch");

    auto slice = [&](double t0, double t1) {
        int s0 = static_cast<int>(std::llround(t0 * t.fs));
        int s1 = static_cast<int>(std::llround(t1 * t.fs));
        Trial e;
        e.subject = t.subject;
        e.session = t.session;
        e.fs = t.fs;
        e.channels = t.channels;
        e.samples = s1 - s0;
        e.data.resize(static_cast<size_t>(e.channels) * e.samples);
        for (int c = 0; c < e.channels; ++c)
            std::copy_n(t.data.begin() + static_cast<size_t>(c) * t.samples + s0, e.samples,
                        e.data.begin() + static_cast<size_t>(c) * e.samples);
        return e;
    };

    Trial rs = slice(cfg.rs_start, cfg.rs_end);
    rs.id = t.id + "_rs";
    rs.kind = TrialKind::RS;
    rs.label.reset();

    Trial ts = slice(cfg.ts_start, cfg.ts_end);
    ts.id = t.id + "_ts";
    ts.kind = TrialKind::TS;
    ts.label = t.label;
    return {std::move(rs), std::move(ts)};
}

std::vector<Trial> preprocess_trial(const Trial& t, const PreprocConfig& cfg, std::vector<std::string>* warnings) {
    cfg.validate();
    Trial r = resample(t, cfg.target_fs);
    r = bandpass(r, cfg.band_lo, cfg.band_hi);

    std::vector<Trial> out;
    if (t.kind == TrialKind::TS) {
        auto [rs, ts] = epoch(r, cfg);
        out.push_back(standardize(rs, warnings));
        out.push_back(standardize(ts, warnings));
    } else {
        // Pure resting recordings contribute only the RS window.
        int s0 = static_cast<int>(std::llround(cfg.rs_start * r.fs));
        int s1 = static_cast<int>(std::llround(cfg.rs_end * r.fs));
        if (r.samples < s1)
            data_error("preprocess: RS trial '" + t.id + "' shorter than the RS window");
        Trial rs;
        rs.id = t.id + "_rs";
        rs.subject = t.subject;
        rs.session = t.session;
        rs.kind = TrialKind::RS;
        rs.fs = r.fs;
        rs.channels = r.channels;
        rs.samples = s1 - s0;
        rs.data.resize(static_cast<size_t>(rs.channels) * rs.samples);
        for (int c = 0; c < rs.channels; ++c)
            std::copy_n(r.data.begin() + static_cast<size_t>(c) * r.samples + s0, rs.samples,
                        rs.data.begin() + static_cast<size_t>(c) * rs.samples);
        out.push_back(standardize(rs, warnings));
    }
    return out;
}

std::vector<Trial> preprocess_all(const std::vector<Trial>& trials, const PreprocConfig& cfg,
                                  std::vector<std::string>* warnings) {
    std::vector<Trial> out;
    for (const auto& t : trials) {
        auto v = preprocess_trial(t, cfg, warnings);
        for (auto& e : v) out.push_back(std::move(e));
    }
    return out;
}

}  // namespace restl
