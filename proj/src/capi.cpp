// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/forgetlab.h"

#include <exception>
#include <new>
#include <string>
#include <vector>

#include "forgetlab/checkpoint_io.hpp"
#include "forgetlab/error.hpp"
#include "forgetlab/runner.hpp"
#include "forgetlab/sweep.hpp"

struct fl_checkpoint {
  forgetlab::Checkpoint checkpoint;
  std::vector<double> flat;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_output;

template <class F>
fl_status guarded(F&& f) {
  g_error.clear();
  try {
    g_output.clear();
    f();
    return FL_OK;
  } catch (const forgetlab::Error& e) {
    g_error = e.what();
    return static_cast<fl_status>(e.code());
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
  } catch (const std::exception& e) {
    g_error = e.what();
  } catch (...) {
    g_error = "unknown error";
  }
  return FL_ERR_RUNTIME;
}

std::string str(const char* s, const char* what) {
  forgetlab::require(s != nullptr, forgetlab::ErrorCode::input, std::string(what) + " is NULL");
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i)
    if (i == s.size() || s[i] == ',') {
      out.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

}  // namespace

extern "C" {

const char* fl_version(void) { return "0.1.0"; }

const char* fl_status_name(fl_status status) {
  if (status == FL_OK) return "ok";
  return forgetlab::to_string(static_cast<forgetlab::ErrorCode>(status));
}

const char* fl_last_error(void) { return g_error.c_str(); }
const char* fl_last_output(void) { return g_output.c_str(); }

fl_status fl_run(const char* config_path, int64_t seed_offset, size_t jobs) {
  return guarded([&] {
    forgetlab::RunCommandOptions opts;
    opts.seed_offset = seed_offset;
    opts.jobs = jobs;
    g_output = forgetlab::cmd_run(str(config_path, "config_path"), opts).string();
  });
}

fl_status fl_analyze(const char* experiment_dir, const char* metrics, size_t spectrum_k, size_t spectrum_m,
                     size_t spectrum_probes, size_t jobs) {
  return guarded([&] {
    forgetlab::AnalyzeOptions opts;
    opts.metrics = split_list(metrics ? metrics : "all");
    if (spectrum_k) opts.spectrum_k = spectrum_k;
    if (spectrum_m) opts.spectrum_m = spectrum_m;
    if (spectrum_probes) opts.spectrum_probes = spectrum_probes;
    opts.jobs = jobs;
    forgetlab::cmd_analyze(str(experiment_dir, "experiment_dir"), opts);
  });
}

fl_status fl_intervene(const char* experiment_dir, const char* kind, double fraction, int64_t layer, size_t task) {
  return guarded([&] {
    forgetlab::InterveneOptions opts;
    opts.kind = forgetlab::intervention_from_string(kind ? kind : "both");
    opts.fraction = fraction;
    if (layer >= 0) opts.layer = static_cast<std::size_t>(layer);
    opts.task = task;
    g_output = forgetlab::cmd_intervene(str(experiment_dir, "experiment_dir"), opts).dump(2);
  });
}

fl_status fl_report(const char* experiment_dir) {
  return guarded([&] { forgetlab::cmd_report(str(experiment_dir, "experiment_dir")); });
}

fl_status fl_sweep(const char* spec_path, const char* const* experiment_dirs, size_t n_dirs, const char* out_dir,
                   size_t jobs) {
  return guarded([&] {
    using forgetlab::ErrorCode;
    forgetlab::require((spec_path != nullptr) != (n_dirs > 0), ErrorCode::schema,
                       "sweep: give either a sweep spec or experiment directories");
    std::filesystem::path out;
    forgetlab::SweepResult result;
    if (spec_path) {
      const forgetlab::SweepSpec spec = forgetlab::load_sweep_spec(spec_path);
      out = out_dir ? std::filesystem::path(out_dir) : spec.output_dir;
      result = forgetlab::sweep(spec.configs, jobs);
    } else {
      forgetlab::require(experiment_dirs != nullptr && out_dir != nullptr, ErrorCode::schema,
                         "sweep: --out is required with experiment directories");
      out = out_dir;
      std::vector<forgetlab::SweepRow> rows;
      for (size_t i = 0; i < n_dirs; ++i) {
        auto r = forgetlab::load_sweep_rows(str(experiment_dirs[i], "experiment_dirs[i]"));
        rows.insert(rows.end(), r.begin(), r.end());
      }
      result = forgetlab::aggregate(std::move(rows));
    }
    forgetlab::write_sweep(out, result);
    g_output = forgetlab::summary_json(result).dump(2);
  });
}

fl_status fl_checkpoint_load(const char* checkpoint_dir, fl_checkpoint** out) {
  return guarded([&] {
    forgetlab::require(out != nullptr, forgetlab::ErrorCode::input, "out is NULL");
    *out = nullptr;
    auto loaded = forgetlab::load_checkpoint(str(checkpoint_dir, "checkpoint_dir"));
    auto* h = new fl_checkpoint{std::move(loaded.checkpoint), {}};
    h->flat = forgetlab::flatten(h->checkpoint.params);
    *out = h;
  });
}

void fl_checkpoint_free(fl_checkpoint* checkpoint) { delete checkpoint; }

size_t fl_checkpoint_num_params(const fl_checkpoint* checkpoint) { return checkpoint ? checkpoint->flat.size() : 0; }

const char* fl_checkpoint_id(const fl_checkpoint* checkpoint) {
  return checkpoint ? checkpoint->checkpoint.meta.id.c_str() : "";
}

uint64_t fl_checkpoint_global_step(const fl_checkpoint* checkpoint) {
  return checkpoint ? checkpoint->checkpoint.meta.global_step : 0;
}

fl_status fl_checkpoint_copy_params(const fl_checkpoint* checkpoint, double* out, size_t n) {
  return guarded([&] {
    forgetlab::require(checkpoint != nullptr && out != nullptr, forgetlab::ErrorCode::input, "NULL argument");
    forgetlab::require(n == checkpoint->flat.size(), forgetlab::ErrorCode::input,
                       "buffer holds " + std::to_string(n) + " values, checkpoint has " +
                           std::to_string(checkpoint->flat.size()));
    std::copy(checkpoint->flat.begin(), checkpoint->flat.end(), out);
  });
}

}  // extern "C"
