#include "alora/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace alora {

int64_t AllocatorConfig::effective_r1() const {
    return r1 > 0 ? r1 : std::max<int64_t>(1, r_target / 16);
}

void AllocatorConfig::validate() const {
    if (r_target < 1) throw ConfigError("AllocatorConfig.r_target must be >= 1");
    if (k1 < 0 || k2 < 0 || n_a < 0) {
        throw ConfigError("AllocatorConfig.k1/k2/n_a must be non-negative");
    }
    if (val_batch_size < 1) {
        throw ConfigError("AllocatorConfig.val_batch_size must be >= 1");
    }
    if (effective_r1() < 1) throw ConfigError("AllocatorConfig.r1 must be >= 1");
    if (n_a * effective_r1() >= r_target) {
        throw ConfigError("AllocatorConfig: n_a * r1 must stay below r_target");
    }
    if (strategy == Strategy::l0_baseline) {
        if (l0_init_rank < 1) throw ConfigError("AllocatorConfig.l0_init_rank >= 1");
        if (l0_prune_period < 1) {
            throw ConfigError("AllocatorConfig.l0_prune_period must be >= 1");
        }
    }
}

double metric_S(const SuperNetwork& model, const Batch& b_val,
                const GateTensorMap* gates) {
    if (b_val.empty()) throw ContractError("metric_S: empty validation batch");
    NoGradGuard ng;
    return -lm_loss(model, b_val, gates).item();
}

namespace {

Tensor const_gates(const std::vector<double>& g) {
    return Tensor::from({static_cast<int64_t>(g.size())}, std::vector<double>(g));
}

}  // namespace

ImportanceReport importance_scores(const SuperNetwork& model, const Batch& b_val,
                                   int64_t round, int64_t val_batch_id) {
    auto adapters = model.all_adapters();
    ImportanceReport report;
    report.round = round;
    report.val_batch_id = val_batch_id;
    report.s_full = metric_S(model, b_val);

    // All-gates-zero base map for the "rank acting alone" views.
    std::map<std::string, std::vector<double>> base_gates;
    bool any_active = false;
    for (const GatedLoraAdapter* a : adapters) {
        base_gates[a->module_id] = a->effective_gates();
        any_active |= a->active_rank() > 0;
    }
    if (!any_active) {
        throw ContractError("importance_scores: no active ranks in the model");
    }

    for (const GatedLoraAdapter* a : adapters) {
        for (int64_t k = 0; k < a->rank(); ++k) {
            if (a->gate_state[static_cast<size_t>(k)] != GateState::Active) continue;

            GateTensorMap without;
            {
                std::vector<double> g = base_gates[a->module_id];
                g[static_cast<size_t>(k)] = 0.0;
                without.emplace(a->module_id, const_gates(g));
            }
            GateTensorMap alone;
            for (const GatedLoraAdapter* m : adapters) {
                std::vector<double> g(m->gate_state.size(), 0.0);
                if (m == a) {
                    g[static_cast<size_t>(k)] =
                        base_gates[a->module_id][static_cast<size_t>(k)];
                }
                alone.emplace(m->module_id, const_gates(g));
            }

            RankScore rs;
            rs.module_id = a->module_id;
            rs.rank_index = k;
            try {
                rs.s_without = metric_S(model, b_val, &without);
                rs.s_alone = metric_S(model, b_val, &alone);
            } catch (const NumericError& e) {
                throw NumericError("importance_scores: non-finite S at rank " +
                                   a->module_id + "[" + std::to_string(k) +
                                   "]: " + e.what());
            }
            rs.is = -rs.s_without + rs.s_alone;
            report.per_rank.push_back(std::move(rs));
        }
    }

    std::map<std::string, std::pair<double, int64_t>> acc;
    for (const RankScore& rs : report.per_rank) {
        auto& [sum, n] = acc[rs.module_id];
        sum += rs.is;
        ++n;
    }
    for (const auto& [id, sn] : acc) {
        report.per_module_mean[id] = sn.first / static_cast<double>(sn.second);
    }
    return report;
}

AllocationDelta reallocate_step(SuperNetwork& model, const ImportanceReport& report,
                                int64_t r1, Rng& rng) {
    if (static_cast<int64_t>(report.per_rank.size()) < r1) {
        throw ContractError("reallocate_step: fewer than r1 active ranks");
    }
    AllocationDelta delta;
    delta.round = report.round;

    std::vector<const RankScore*> order;
    order.reserve(report.per_rank.size());
    for (const RankScore& rs : report.per_rank) order.push_back(&rs);
    std::sort(order.begin(), order.end(), [](const RankScore* a, const RankScore* b) {
        if (a->is != b->is) return a->is < b->is;
        if (a->module_id != b->module_id) return a->module_id < b->module_id;
        return a->rank_index < b->rank_index;
    });

    std::vector<std::string> pruned_modules;
    for (int64_t i = 0; i < r1; ++i) {
        const RankScore* rs = order[static_cast<size_t>(i)];
        GatedLoraAdapter* a = model.find_adapter(rs->module_id);
        if (a == nullptr) {
            throw ContractError("reallocate_step: unknown module " + rs->module_id);
        }
        prune_rank(*a, rs->rank_index);
        delta.pruned.emplace_back(rs->module_id, rs->rank_index);
        pruned_modules.push_back(rs->module_id);
    }

    // Highest mean-IS module; std::map order makes ties deterministic
    // (lowest module id wins).
    std::string best;
    double best_mean = 0.0;
    for (const auto& [id, mean] : report.per_module_mean) {
        if (best.empty() || mean > best_mean) {
            best = id;
            best_mean = mean;
        }
    }
    bool best_was_pruned =
        std::find(pruned_modules.begin(), pruned_modules.end(), best) !=
        pruned_modules.end();
    if (!best.empty() && !best_was_pruned) {
        grow_ranks(*model.find_adapter(best), r1, rng);
        delta.added.emplace_back(best, r1);
    }
    return delta;
}

namespace {

std::vector<double> flatten(const std::vector<Tensor>& params,
                            const GradientMap& grads) {
    std::vector<double> out;
    for (const Tensor& p : params) {
        const auto& g = grads.at(p.name());
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

GradientMap unflatten(const std::vector<Tensor>& params,
                      const std::vector<double>& flat) {
    GradientMap out;
    size_t off = 0;
    for (const Tensor& p : params) {
        size_t n = p.data().size();
        out[p.name()] = std::vector<double>(flat.begin() + static_cast<int64_t>(off),
                                            flat.begin() +
                                                static_cast<int64_t>(off + n));
        off += n;
    }
    return out;
}

std::vector<const GatedLoraAdapter*> active_adapters(const SuperNetwork& model) {
    std::vector<const GatedLoraAdapter*> out;
    for (const auto* a : model.all_adapters()) {
        if (a->active_rank() > 0) out.push_back(a);
    }
    return out;
}

// One optimizer update on `params` from CE (+ optional auxiliary
// regularizer loss), with gradient alignment applied between the two.
StepMetrics train_step(SuperNetwork& model, const Batch& batch,
                       const std::vector<Tensor>& params, Optimizer& opt,
                       const TrainOptions& to, const GateTensorMap* gates,
                       const std::vector<const HardConcreteGate*>* hc_gates) {
    StepMetrics m;
    Tensor ce = lm_loss(model, batch, gates);
    m.train_ce = ce.item();

    Tensor aux;
    if (to.reg.orthogonal > 0.0) {
        Tensor orth = orthogonal_reg(active_adapters(model));
        m.reg_orth = orth.item();
        aux = ops::scale(orth, to.reg.orthogonal);
    }
    if (hc_gates != nullptr && to.reg.l0 > 0.0) {
        Tensor l0 = Tensor::scalar(0.0);
        for (const HardConcreteGate* g : *hc_gates) {
            l0 = ops::add(l0, expected_l0(*g));
        }
        m.reg_l0 = l0.item();
        Tensor weighted = ops::scale(l0, to.reg.l0);
        aux = aux.defined() ? ops::add(aux, weighted) : weighted;
    }

    GradientMap g_ce = backward(ce, params);
    if (!aux.defined()) {
        opt.step(params, g_ce);
    } else {
        GradientMap g_aux = backward(aux, params);
        std::vector<double> f_ce = flatten(params, g_ce);
        std::vector<double> f_aux = flatten(params, g_aux);
        if (to.ga.mode == GAMode::off) {
            for (size_t i = 0; i < f_ce.size(); ++i) f_ce[i] += f_aux[i];
            opt.step(params, unflatten(params, f_ce));
        } else {
            GAResult ga = combine(f_ce, f_aux, to.ga);
            m.ga_degrees = ga.degrees;
            m.ga_coefficient = ga.coefficient;
            opt.step(params, unflatten(params, ga.grad));
        }
    }
    m.active_ranks = model.total_active_ranks();
    m.step = opt.steps_taken();
    if (to.logger) to.logger(m);
    return m;
}

std::vector<Batch> epoch_batches(const Batch& split, int64_t batch_size, Rng& rng) {
    std::vector<size_t> idx(split.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    std::vector<Batch> out;
    for (size_t start = 0; start + static_cast<size_t>(batch_size) <= idx.size();
         start += static_cast<size_t>(batch_size)) {
        Batch b;
        b.reserve(static_cast<size_t>(batch_size));
        for (int64_t j = 0; j < batch_size; ++j) {
            b.push_back(split[idx[start + static_cast<size_t>(j)]]);
        }
        out.push_back(std::move(b));
    }
    if (out.empty()) {
        throw ConfigError("training split smaller than one batch");
    }
    return out;
}

// Plain adapter-parameter training; returns the number of epochs run
// (early stop on a fixed validation batch, patience 3, when patience > 0).
void train_adapter_epochs(SuperNetwork& model, const Dataset& data, int64_t epochs,
                          Optimizer& opt, const TrainOptions& to, Rng& rng,
                          int64_t patience, const char* phase) {
    Rng val_rng = Rng::derive(data.spec.seed, "warmup-val");
    Batch val_batch = sample_batch(data.val, std::min<int64_t>(64,
        static_cast<int64_t>(data.val.size())), val_rng);
    double best = std::numeric_limits<double>::infinity();
    int64_t bad = 0;
    for (int64_t e = 0; e < epochs; ++e) {
        auto batches = epoch_batches(data.train, to.batch_size, rng);
        for (size_t i = 0; i < batches.size(); ++i) {
            try {
                train_step(model, batches[i], model.adapter_params(false), opt, to,
                           nullptr, nullptr);
            } catch (const NumericError& err) {
                throw NumericError(std::string(phase) + " epoch " + std::to_string(e) +
                                   " step " + std::to_string(i) + ": " + err.what());
            }
        }
        if (patience > 0) {
            double val_ce = -metric_S(model, val_batch);
            if (val_ce < best - 1e-12) {
                best = val_ce;
                bad = 0;
            } else if (++bad >= patience) {
                break;
            }
        }
    }
}

std::map<std::string, int64_t> rank_map(const SuperNetwork& model) {
    std::map<std::string, int64_t> out;
    for (const auto* a : model.all_adapters()) out[a->module_id] = a->active_rank();
    return out;
}

}  // namespace

AllocationHistory run_alora(SuperNetwork& model, const Dataset& data,
                            const AllocatorConfig& config, const TrainOptions& train,
                            Rng& rng) {
    config.validate();
    AllocationHistory history;
    history.initial_rank_per_module =
        model.budget / (model.config.layers * kModulesPerBlock);
    for (const auto* a : model.all_adapters()) history.modules.push_back(a->module_id);

    Optimizer opt(train.optimizer);
    train_adapter_epochs(model, data, config.k1, opt, train, rng, /*patience=*/3,
                         "warm-up");

    const int64_t r1 = config.effective_r1();
    for (int64_t round = 1; round <= config.n_a; ++round) {
        Rng val_rng = Rng::derive(data.spec.seed, "bval." + std::to_string(round));
        Batch b_val = sample_batch(data.val, config.val_batch_size, val_rng);
        ImportanceReport report = importance_scores(model, b_val, round, round);
        AllocationDelta delta = reallocate_step(model, report, r1, rng);

        history.reports.push_back(std::move(report));
        history.deltas.push_back(std::move(delta));
        history.active_total_after.push_back(model.total_active_ranks());
        history.rank_map_after.push_back(rank_map(model));
        if (model.total_active_ranks() > config.r_target) {
            throw ContractError("run_alora: budget bound violated at round " +
                                std::to_string(round));
        }

        train_adapter_epochs(model, data, config.k2, opt, train, rng, /*patience=*/0,
                             ("recovery round " + std::to_string(round)).c_str());
    }
    return history;
}

AllocationHistory dnas_baseline_allocate(SuperNetwork& model, const Dataset& data,
                                         const AllocatorConfig& config,
                                         const TrainOptions& train, Rng& rng) {
    config.validate();
    if (config.strategy != Strategy::dnas_baseline) {
        throw ConfigError("dnas_baseline_allocate: strategy mismatch");
    }
    for (auto* a : model.all_adapters()) a->mode = GateMode::trainable;

    // Seeded 80/20 split of the training set into D1 (weights) / D2 (gates).
    Batch d1, d2;
    {
        std::vector<size_t> idx(data.train.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng split_rng = Rng::derive(data.spec.seed, "dnas-split");
        std::shuffle(idx.begin(), idx.end(), split_rng.engine());
        size_t cut = idx.size() * 8 / 10;
        for (size_t i = 0; i < idx.size(); ++i) {
            (i < cut ? d1 : d2).push_back(data.train[idx[i]]);
        }
    }

    AllocationHistory history;
    history.initial_rank_per_module =
        model.budget / (model.config.layers * kModulesPerBlock);
    for (const auto* a : model.all_adapters()) history.modules.push_back(a->module_id);

    Optimizer opt_w(train.optimizer);
    Optimizer opt_g(train.optimizer);

    auto run_epochs = [&](int64_t epochs, const char* phase) {
        for (int64_t e = 0; e < epochs; ++e) {
            auto b1 = epoch_batches(d1, train.batch_size, rng);
            auto b2 = epoch_batches(d2, train.batch_size, rng);
            for (size_t i = 0; i < b1.size(); ++i) {
                try {
                    train_step(model, b1[i], model.adapter_params(false), opt_w, train,
                               nullptr, nullptr);
                    // First-order alternation: one gate-logit step per
                    // weight step, cycling through D2.
                    std::vector<Tensor> gate_params;
                    for (const auto* a : model.all_adapters()) {
                        if (a->rank() > 0) gate_params.push_back(a->gate_logits);
                    }
                    train_step(model, b2[i % b2.size()], gate_params, opt_g, train,
                               nullptr, nullptr);
                } catch (const NumericError& err) {
                    throw NumericError(std::string(phase) + " epoch " +
                                       std::to_string(e) + " step " +
                                       std::to_string(i) + ": " + err.what());
                }
            }
        }
    };

    run_epochs(config.k1, "dnas warm-up");

    const int64_t r1 = config.effective_r1();
    for (int64_t round = 1; round <= config.n_a; ++round) {
        // Architecture-weight report: the relaxed gate value plays the role
        // of the importance score.
        ImportanceReport report;
        report.round = round;
        for (const auto* a : model.all_adapters()) {
            for (int64_t k = 0; k < a->rank(); ++k) {
                if (a->gate_state[static_cast<size_t>(k)] != GateState::Active) {
                    continue;
                }
                RankScore rs;
                rs.module_id = a->module_id;
                rs.rank_index = k;
                rs.s_alone = gate_value(a->gate_logits.at(k), GateState::Active);
                rs.is = rs.s_alone;
                report.per_rank.push_back(rs);
            }
        }
        std::map<std::string, std::pair<double, int64_t>> acc;
        for (const RankScore& rs : report.per_rank) {
            auto& [sum, n] = acc[rs.module_id];
            sum += rs.is;
            ++n;
        }
        for (const auto& [id, sn] : acc) {
            report.per_module_mean[id] = sn.first / static_cast<double>(sn.second);
        }

        AllocationDelta delta = reallocate_step(model, report, r1, rng);
        history.reports.push_back(std::move(report));
        history.deltas.push_back(std::move(delta));
        history.active_total_after.push_back(model.total_active_ranks());
        history.rank_map_after.push_back(rank_map(model));

        run_epochs(config.k2, ("dnas recovery round " + std::to_string(round)).c_str());
    }
    return history;
}

AllocationHistory l0_baseline_allocate(SuperNetwork& model, const Dataset& data,
                                       const AllocatorConfig& config,
                                       const TrainOptions& train, Rng& rng) {
    config.validate();
    if (config.strategy != Strategy::l0_baseline) {
        throw ConfigError("l0_baseline_allocate: strategy mismatch");
    }

    std::vector<HardConcreteGate> gates;
    std::vector<GatedLoraAdapter*> adapters = model.all_adapters();
    gates.reserve(adapters.size());
    for (const auto* a : adapters) {
        gates.push_back(make_hard_concrete(a->module_id + ".log_theta", a->rank()));
    }

    AllocationHistory history;
    history.initial_rank_per_module =
        model.budget / (model.config.layers * kModulesPerBlock);
    for (const auto* a : model.all_adapters()) history.modules.push_back(a->module_id);

    Optimizer opt(train.optimizer);
    const int64_t total_epochs = config.k1 + config.n_a * config.k2;
    int64_t step = 0;
    int64_t prune_events = 0;

    for (int64_t e = 0; e < total_epochs; ++e) {
        auto batches = epoch_batches(data.train, train.batch_size, rng);
        for (size_t i = 0; i < batches.size(); ++i) {
            GateTensorMap gate_map;
            std::vector<const HardConcreteGate*> hc;
            std::vector<Tensor> params = model.adapter_params(false);
            for (size_t ai = 0; ai < adapters.size(); ++ai) {
                const GatedLoraAdapter* a = adapters[ai];
                if (a->rank() == 0) continue;
                Tensor lam = hard_concrete_sample(gates[ai], rng);
                // Hard prune wins over the stochastic gate.
                std::vector<double> mask(a->gate_state.size());
                for (size_t k = 0; k < mask.size(); ++k) {
                    mask[k] =
                        a->gate_state[k] == GateState::Active ? 1.0 : 0.0;
                }
                gate_map.emplace(
                    a->module_id,
                    ops::mul(lam, Tensor::from({a->rank()}, std::move(mask))));
                hc.push_back(&gates[ai]);
                params.push_back(gates[ai].log_theta);
            }
            try {
                train_step(model, batches[i], params, opt, train, &gate_map, &hc);
            } catch (const NumericError& err) {
                throw NumericError("l0 epoch " + std::to_string(e) + " step " +
                                   std::to_string(i) + ": " + err.what());
            }
            ++step;

            if (step % config.l0_prune_period == 0) {
                AllocationDelta delta;
                delta.round = ++prune_events;
                for (size_t ai = 0; ai < adapters.size(); ++ai) {
                    GatedLoraAdapter* a = adapters[ai];
                    for (int64_t k = 0; k < a->rank(); ++k) {
                        if (a->gate_state[static_cast<size_t>(k)] !=
                            GateState::Active) {
                            continue;
                        }
                        if (gates[ai].log_theta.at(k) < config.l0_threshold) {
                            prune_rank(*a, k);
                            delta.pruned.emplace_back(a->module_id, k);
                        }
                    }
                }
                if (!delta.pruned.empty()) {
                    history.deltas.push_back(std::move(delta));
                    history.active_total_after.push_back(model.total_active_ranks());
                    history.rank_map_after.push_back(rank_map(model));
                }
            }
        }
    }
    return history;
}

std::string history_to_json(const AllocationHistory& h) {
    nlohmann::json j;
    j["initial_rank_per_module"] = h.initial_rank_per_module;
    j["modules"] = h.modules;
    j["rounds"] = nlohmann::json::array();
    for (size_t i = 0; i < h.deltas.size(); ++i) {
        nlohmann::json round;
        round["round"] = h.deltas[i].round;
        round["pruned"] = nlohmann::json::array();
        for (const auto& [m, k] : h.deltas[i].pruned) {
            round["pruned"].push_back({{"module", m}, {"rank_index", k}});
        }
        round["added"] = nlohmann::json::array();
        for (const auto& [m, n] : h.deltas[i].added) {
            round["added"].push_back({{"module", m}, {"count", n}});
        }
        if (i < h.active_total_after.size()) {
            round["active_total_after"] = h.active_total_after[i];
        }
        if (i < h.rank_map_after.size()) {
            round["rank_map_after"] = h.rank_map_after[i];
        }
        if (i < h.reports.size()) {
            const ImportanceReport& r = h.reports[i];
            nlohmann::json jr;
            jr["val_batch_id"] = r.val_batch_id;
            jr["s_full"] = r.s_full;
            jr["per_rank"] = nlohmann::json::array();
            for (const RankScore& rs : r.per_rank) {
                jr["per_rank"].push_back({{"module", rs.module_id},
                                          {"rank_index", rs.rank_index},
                                          {"s_without", rs.s_without},
                                          {"s_alone", rs.s_alone},
                                          {"is", rs.is}});
            }
            jr["per_module_mean"] = r.per_module_mean;
            round["report"] = std::move(jr);
        }
        j["rounds"].push_back(std::move(round));
    }
    return j.dump(2);
}

std::string history_to_csv(const AllocationHistory& h) {
    std::ostringstream os;
    os << "round,module_id,rank_index,S_without,S_alone,IS,action\n";
    os.precision(17);
    for (size_t i = 0; i < h.reports.size(); ++i) {
        const ImportanceReport& r = h.reports[i];
        const AllocationDelta* d = i < h.deltas.size() ? &h.deltas[i] : nullptr;
        for (const RankScore& rs : r.per_rank) {
            const char* action = "keep";
            if (d != nullptr) {
                for (const auto& [m, k] : d->pruned) {
                    if (m == rs.module_id && k == rs.rank_index) {
                        action = "prune";
                        break;
                    }
                }
            }
            os << r.round << ',' << rs.module_id << ',' << rs.rank_index << ','
               << rs.s_without << ',' << rs.s_alone << ',' << rs.is << ',' << action
               << '\n';
        }
        if (d != nullptr) {
            for (const auto& [m, n] : d->added) {
                os << r.round << ',' << m << ',' << -1 << ",0,0,0,add:" << n << '\n';
            }
        }
    }
    return os.str();
}

}  // namespace alora
