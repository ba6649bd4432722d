#include "due/report.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "due/dataset.hpp"
#include "due/png_io.hpp"
#include "due/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace due {

// ---- 5x7 bitmap font -------------------------------------------------------

namespace {

struct Glyph {
    char c;
    std::uint8_t rows[7];  // low 5 bits per row, MSB = leftmost column
};

// Lowercase-only face; draw_text folds input to lowercase.
const Glyph kFont[] = {
    {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
    {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
    {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
    {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
    {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
    {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
    {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
    {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
    {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
    {'a', {0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f}},
    {'b', {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1e}},
    {'c', {0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e}},
    {'d', {0x01, 0x01, 0x0d, 0x13, 0x11, 0x11, 0x0f}},
    {'e', {0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e}},
    {'f', {0x06, 0x09, 0x08, 0x1c, 0x08, 0x08, 0x08}},
    {'g', {0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e}},
    {'h', {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11}},
    {'i', {0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e}},
    {'j', {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c}},
    {'k', {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12}},
    {'l', {0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
    {'m', {0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15}},
    {'n', {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11}},
    {'o', {0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e}},
    {'p', {0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10}},
    {'q', {0x00, 0x00, 0x0d, 0x13, 0x0f, 0x01, 0x01}},
    {'r', {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10}},
    {'s', {0x00, 0x00, 0x0e, 0x10, 0x0e, 0x01, 0x1e}},
    {'t', {0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06}},
    {'u', {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d}},
    {'v', {0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04}},
    {'w', {0x00, 0x00, 0x11, 0x15, 0x15, 0x15, 0x0a}},
    {'x', {0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11}},
    {'y', {0x00, 0x00, 0x11, 0x11, 0x0f, 0x01, 0x0e}},
    {'z', {0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08}},
    {'-', {0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00}},
    {':', {0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00}},
    {'=', {0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'/', {0x01, 0x02, 0x04, 0x04, 0x08, 0x10, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f}},
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
};

const Glyph* find_glyph(char c) {
    for (const auto& g : kFont)
        if (g.c == c) return &g;
    return nullptr;
}

void draw_text(ImageRGB& img, int x, int y, const std::string& text,
               std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    int cx = x;
    for (char raw : text) {
        char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        const Glyph* gl = find_glyph(c);
        if (!gl) gl = find_glyph(' ');
        for (int row = 0; row < 7; ++row)
            for (int col = 0; col < 5; ++col)
                if (gl->rows[row] & (1 << (4 - col))) img.set(cx + col, y + row, r, g, b);
        cx += 6;
    }
}

int text_width(const std::string& text) { return 6 * static_cast<int>(text.size()); }

void draw_line(ImageRGB& img, int x0, int y0, int x1, int y1,
               std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        img.set(x0, y0, r, g, b);
        if (x0 == x1 && y0 == y1) break;
        int e2 = 2 * err;
        if (e2 >= dy) { err += dy; x0 += sx; }
        if (e2 <= dx) { err += dx; y0 += sy; }
    }
}

void fill_rect(ImageRGB& img, int x, int y, int w, int h,
               std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    for (int j = y; j < y + h; ++j)
        for (int i = x; i < x + w; ++i) img.set(i, j, r, g, b);
}

std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// Warm colormap ("hot"): black -> red -> yellow -> white.
void warm_color(double t, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b) {
    if (t < 0.0) t = 0.0;
    if (t > 1.0) t = 1.0;
    auto to8 = [](double v) { return static_cast<std::uint8_t>(255.0 * std::min(1.0, std::max(0.0, v)) + 0.5); };
    r = to8(3.0 * t);
    g = to8(3.0 * t - 1.0);
    b = to8(3.0 * t - 2.0);
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

}  // namespace

// ---- line plot -------------------------------------------------------------

void render_line_plot(const std::string& path, const std::string& title,
                      const std::vector<PlotSeries>& series, bool log_x,
                      double y_min, double y_max) {
    require(!series.empty(), ErrorKind::validation, "line plot needs at least one series");
    require(y_max > y_min, ErrorKind::validation, "line plot y range is empty");
    double xmin = 0.0, xmax = 0.0;
    bool first = true;
    for (const auto& s : series) {
        require(!s.xs.empty() && s.xs.size() == s.ys.size(), ErrorKind::validation,
                "line plot series '" + s.name + "' is empty or ragged");
        for (double x : s.xs) {
            require(!log_x || x > 0.0, ErrorKind::validation,
                    "log-x plot requires positive x values");
            if (first || x < xmin) xmin = x;
            if (first || x > xmax) xmax = x;
            first = false;
        }
    }
    auto xmap = [&](double x) { return log_x ? std::log10(x) : x; };
    double lo = xmap(xmin), hi = xmap(xmax);
    if (hi - lo < 1e-12) { lo -= 0.5; hi += 0.5; }

    const int W = 520, H = 340, ml = 46, mr = 14, mt = 24, mb = 36;
    const int px0 = ml, px1 = W - mr, py0 = mt, py1 = H - mb;
    ImageRGB img(W, H, 250, 250, 250);

    auto to_px = [&](double x) {
        return px0 + static_cast<int>((xmap(x) - lo) / (hi - lo) * (px1 - px0) + 0.5);
    };
    auto to_py = [&](double y) {
        double t = (y - y_min) / (y_max - y_min);
        t = std::min(1.0, std::max(0.0, t));
        return py1 - static_cast<int>(t * (py1 - py0) + 0.5);
    };

    // y gridlines + tick labels
    for (int k = 0; k <= 4; ++k) {
        double yv = y_min + (y_max - y_min) * k / 4.0;
        int yy = to_py(yv);
        draw_line(img, px0, yy, px1, yy, 225, 225, 225);
        std::string lab = format_tick(yv);
        draw_text(img, px0 - 6 - text_width(lab), yy - 3, lab, 90, 90, 90);
    }
    // x ticks: decades when log, else 5 evenly spaced
    std::vector<double> xticks;
    if (log_x) {
        for (int e = static_cast<int>(std::floor(lo)); e <= static_cast<int>(std::ceil(hi)); ++e)
            if (std::pow(10.0, e) >= xmin / 1.001 && std::pow(10.0, e) <= xmax * 1.001)
                xticks.push_back(std::pow(10.0, e));
    } else {
        for (int k = 0; k <= 4; ++k) xticks.push_back(xmin + (xmax - xmin) * k / 4.0);
    }
    for (double xv : xticks) {
        int xx = to_px(xv);
        draw_line(img, xx, py1, xx, py1 + 4, 120, 120, 120);
        std::string lab = format_tick(xv);
        draw_text(img, xx - text_width(lab) / 2, py1 + 8, lab, 90, 90, 90);
    }
    // frame
    draw_line(img, px0, py0, px0, py1, 60, 60, 60);
    draw_line(img, px0, py1, px1, py1, 60, 60, 60);

    draw_text(img, px0, 8, title, 30, 30, 30);

    // legend, right-aligned above the frame
    int lx = px1;
    for (auto it = series.rbegin(); it != series.rend(); ++it) {
        int w = text_width(it->name) + 14;
        lx -= w + 10;
        fill_rect(img, lx, 10, 10, 4, it->rgb[0], it->rgb[1], it->rgb[2]);
        draw_text(img, lx + 14, 8, it->name, 60, 60, 60);
    }

    for (const auto& s : series) {
        int prevx = 0, prevy = 0;
        for (size_t i = 0; i < s.xs.size(); ++i) {
            int xx = to_px(s.xs[i]), yy = to_py(s.ys[i]);
            if (i) draw_line(img, prevx, prevy, xx, yy, s.rgb[0], s.rgb[1], s.rgb[2]);
            fill_rect(img, xx - 1, yy - 1, 3, 3, s.rgb[0], s.rgb[1], s.rgb[2]);
            prevx = xx;
            prevy = yy;
        }
    }
    write_png(path, img);
}

// ---- saliency overlay figure -------------------------------------------

namespace {

// Two side-by-side panels of the middle slice: saliency (warm over grayscale)
// and ground-truth mask (green over grayscale).
void render_overlay(const std::string& path, const std::string& caption,
                    const Tensor& volume, const Tensor& saliency, const Tensor& gt) {
    int D = volume.dim(0), Hh = volume.dim(1), Ww = volume.dim(2);
    int z = D / 2;
    const int scale = 3, pad = 8, cap = 14;
    int pw = Ww * scale, ph = Hh * scale;
    ImageRGB img(pad + pw + pad + pw + pad, cap + ph + pad, 18, 18, 22);
    draw_text(img, pad, 4, caption, 225, 225, 225);

    auto vox = [&](const Tensor& t, int y, int x) {
        return static_cast<double>(t[(static_cast<int64_t>(z) * Hh + y) * Ww + x]);
    };
    for (int y = 0; y < ph; ++y) {
        for (int x = 0; x < pw; ++x) {
            int sy = y / scale, sx = x / scale;
            double v = std::min(1.0, std::max(0.0, vox(volume, sy, sx)));
            auto g8 = static_cast<std::uint8_t>(255.0 * v + 0.5);
            // left panel: saliency heat
            img.set(pad + x, cap + y, g8, g8, g8);
            double s = vox(saliency, sy, sx);
            std::uint8_t hr, hg, hb;
            warm_color(s, hr, hg, hb);
            img.blend(pad + x, cap + y, hr, hg, hb, 0.65 * std::min(1.0, std::max(0.0, s)));
            // right panel: annotation
            int rx = pad + pw + pad + x;
            img.set(rx, cap + y, g8, g8, g8);
            if (vox(gt, sy, sx) >= 0.5) img.blend(rx, cap + y, 70, 230, 110, 0.5);
        }
    }
    draw_text(img, pad + 3, cap + 3, "saliency", 240, 240, 240);
    draw_text(img, pad + pw + pad + 3, cap + 3, "annotation", 240, 240, 240);
    write_png(path, img);
}

}  // namespace

// ---- evaluation ----------------------------------------------------------

EvaluationResult evaluate_samples(ResNet3d& net, const std::vector<EvalSample>& samples,
                                  double threshold) {
    require(!samples.empty(), ErrorKind::validation, "no samples to evaluate");
    require(threshold >= 0.0 && threshold <= 1.0, ErrorKind::validation,
            "binarization threshold must lie in [0, 1]");
    std::string layer = "stage" + std::to_string(net.cfg.stages());

    EvaluationResult res;
    std::vector<double> scores;
    std::vector<int> labels, predicted;
    std::vector<double> ious, precs, recs, f1s;
    std::vector<Tensor> saliencies, gts;

    for (const auto& s : samples) {
        require(s.label == 0 || s.label == 1, ErrorKind::validation,
                "labels must be 0/1: sample " + s.id);
        auto probs = predict(net, s.volume);
        SampleMetrics m;
        m.id = s.id;
        m.label = s.label;
        m.p_positive = probs[1];
        scores.push_back(probs[1]);
        labels.push_back(s.label);
        predicted.push_back(probs[1] > 0.5 ? 1 : 0);
        if (s.label == 1) {
            check_same_shape(s.gt_mask, s.volume, "evaluate_samples mask");
            Saliency sal = gradcam3d(net, s.volume, 1, layer);
            Tensor bin = binarize(sal.values, threshold);
            m.has_explanation = true;
            m.iou = iou(bin, s.gt_mask);
            PrecisionRecallF1 prf = precision_recall_f1(bin, s.gt_mask);
            m.precision = prf.precision;
            m.recall = prf.recall;
            m.f1 = prf.f1;
            ious.push_back(m.iou);
            precs.push_back(m.precision);
            recs.push_back(m.recall);
            f1s.push_back(m.f1);
            saliencies.push_back(std::move(sal.values));
            gts.push_back(s.gt_mask);
        }
        res.per_sample.push_back(std::move(m));
    }

    if (!ious.empty()) {
        res.aggregates["iou"] = mean_std(ious);
        res.aggregates["precision"] = mean_std(precs);
        res.aggregates["recall"] = mean_std(recs);
        res.aggregates["f1"] = mean_std(f1s);
        res.sweep = threshold_sweep(saliencies, gts);
    }
    res.aggregates["accuracy"] = MeanStd{accuracy(predicted, labels), 0.0};
    int npos = 0;
    for (int l : labels) npos += l;
    if (npos > 0 && npos < static_cast<int>(labels.size()))
        res.aggregates["roc_auc"] = MeanStd{roc_auc(scores, labels), 0.0};
    if (npos > 0) res.aggregates["pr_auc"] = MeanStd{pr_auc(scores, labels), 0.0};
    return res;
}

// ---- report IO -------------------------------------------------------------

namespace {

json result_to_json(const EvaluationResult& res, const json& config_snapshot,
                    const std::string& split, double threshold) {
    json j;
    j["format_version"] = 1;
    j["config"] = config_snapshot;
    j["split"] = split;
    j["threshold"] = threshold;
    j["per_sample"] = json::array();
    for (const auto& m : res.per_sample) {
        json e;
        e["id"] = m.id;
        e["label"] = m.label;
        e["p_positive"] = m.p_positive;
        e["has_explanation"] = m.has_explanation;
        e["iou"] = m.iou;
        e["precision"] = m.precision;
        e["recall"] = m.recall;
        e["f1"] = m.f1;
        j["per_sample"].push_back(std::move(e));
    }
    json agg;
    for (const auto& [name, ms] : res.aggregates)
        agg[name] = json{{"mean", ms.mean}, {"std", ms.std_dev}};
    j["aggregates"] = std::move(agg);
    j["sweep"] = json{{"thresholds", res.sweep.thresholds},
                      {"iou", res.sweep.mean_iou},
                      {"f1", res.sweep.mean_f1}};
    return j;
}

}  // namespace

EvaluationResult load_report(const std::string& path) {
    require(fs::exists(path), ErrorKind::io, "no report at " + path);
    std::ifstream f(path);
    require(f.good(), ErrorKind::io, "cannot read " + path);
    EvaluationResult res;
    try {
        json j = json::parse(f);
        for (const auto& e : j.at("per_sample")) {
            SampleMetrics m;
            m.id = e.at("id").get<std::string>();
            m.label = e.at("label").get<int>();
            m.p_positive = e.at("p_positive").get<double>();
            m.has_explanation = e.at("has_explanation").get<bool>();
            m.iou = e.at("iou").get<double>();
            m.precision = e.at("precision").get<double>();
            m.recall = e.at("recall").get<double>();
            m.f1 = e.at("f1").get<double>();
            res.per_sample.push_back(std::move(m));
        }
        for (const auto& [name, v] : j.at("aggregates").items())
            res.aggregates[name] = MeanStd{v.at("mean").get<double>(), v.at("std").get<double>()};
        const auto& sw = j.at("sweep");
        res.sweep.thresholds = sw.at("thresholds").get<std::vector<double>>();
        res.sweep.mean_iou = sw.at("iou").get<std::vector<double>>();
        res.sweep.mean_f1 = sw.at("f1").get<std::vector<double>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::corrupt_file, std::string("malformed report: ") + e.what());
    }
    return res;
}

EvaluationResult emit_report(const ReportInputs& in) {
    require(!in.out_dir.empty(), ErrorKind::validation, "emit_report needs an output dir");
    require(in.max_overlays >= 0, ErrorKind::validation, "max_overlays must be >= 0");

    json config_snapshot;
    try {
        config_snapshot = json::parse(in.config_json);
    } catch (const json::exception&) {
        fail(ErrorKind::validation, "config snapshot is not valid json");
    }

    // Probe every required artifact up front so one error names all absences.
    std::vector<std::string> missing;
    auto probe = [&](const fs::path& p) {
        if (!fs::exists(p)) missing.push_back(p.string());
    };
    probe(fs::path(in.classifier_dir) / "meta.json");
    probe(fs::path(in.classifier_dir) / "params.bin");
    fs::path manifest_path = fs::path(in.dataset_dir) / "manifest.json";
    probe(manifest_path);

    DatasetManifest man;
    std::vector<const SampleEntry*> entries;
    if (fs::exists(manifest_path)) {
        man = load_manifest(in.dataset_dir);
        if (in.split.empty())
            for (const auto& s : man.samples) entries.push_back(&s);
        else
            entries = man.in_split(in.split);
        for (const SampleEntry* e : entries) {
            probe(man.resolve(e->volume_path));
            probe(man.resolve(e->mask_path));
        }
    }
    require(missing.empty(), ErrorKind::reporting,
            "missing inputs: " + join(missing, ", "));
    require(!entries.empty(), ErrorKind::reporting,
            "split '" + in.split + "' has no samples to evaluate");

    LoadedClassifier lc = load_classifier(in.classifier_dir);

    std::vector<EvalSample> samples;
    samples.reserve(entries.size());
    for (const SampleEntry* e : entries) {
        EvalSample s;
        s.id = e->id;
        s.label = e->label;
        s.volume = load_volume(man.resolve(e->volume_path)).data;
        s.gt_mask = load_annotation(man.resolve(e->mask_path)).mask;
        samples.push_back(std::move(s));
    }

    EvaluationResult res = evaluate_samples(lc.net, samples, in.threshold);

    fs::create_directories(fs::path(in.out_dir) / "figures");
    {
        json j = result_to_json(res, config_snapshot, in.split, in.threshold);
        std::ofstream f(fs::path(in.out_dir) / "report.json");
        require(f.good(), ErrorKind::io, "cannot write report.json in " + in.out_dir);
        f << j.dump(2) << "\n";
    }

    if (!res.sweep.thresholds.empty()) {
        PlotSeries si{"iou", res.sweep.thresholds, res.sweep.mean_iou, {220, 90, 40}};
        PlotSeries sf{"f1", res.sweep.thresholds, res.sweep.mean_f1, {60, 110, 220}};
        render_line_plot((fs::path(in.out_dir) / "figures" / "sweep.png").string(),
                         "saliency threshold sweep", {si, sf});
    }

    std::string layer = "stage" + std::to_string(lc.net.cfg.stages());
    int made = 0;
    for (size_t i = 0; i < samples.size() && made < in.max_overlays; ++i) {
        if (samples[i].label != 1) continue;
        Saliency sal = gradcam3d(lc.net, samples[i].volume, 1, layer);
        char cap[128];
        std::snprintf(cap, sizeof cap, "%s  p(pos)=%.3f", samples[i].id.c_str(),
                      res.per_sample[i].p_positive);
        render_overlay((fs::path(in.out_dir) / "figures" /
                        ("overlay_" + samples[i].id + ".png")).string(),
                       cap, samples[i].volume, sal.values, samples[i].gt_mask);
        ++made;
    }
    return res;
}

}  // namespace due
