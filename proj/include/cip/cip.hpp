#pragma once

// Competing information-constrained primitives: an ensemble of
// information-bottlenecked policies with decentralized softmax competition,
// trained on-policy (A2C / PPO) on desk-scale environments.

#include "cip/checkpoint.hpp"
#include "cip/config.hpp"
#include "cip/distributions.hpp"
#include "cip/envs.hpp"
#include "cip/evaluate.hpp"
#include "cip/grad_check.hpp"
#include "cip/init.hpp"
#include "cip/metrics.hpp"
#include "cip/nn.hpp"
#include "cip/primitives.hpp"
#include "cip/rng.hpp"
#include "cip/runner.hpp"
#include "cip/selfcheck.hpp"
#include "cip/tape.hpp"
#include "cip/tensor.hpp"
#include "cip/trainer.hpp"
