// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cmr/checkpoint.hpp"
#include "cmr/config.hpp"
#include "cmr/cross_modality.hpp"
#include "cmr/dump.hpp"
#include "cmr/encoders.hpp"
#include "cmr/entity_relevance.hpp"
#include "cmr/errors.hpp"
#include "cmr/experiment.hpp"
#include "cmr/grad_check.hpp"
#include "cmr/model.hpp"
#include "cmr/nn.hpp"
#include "cmr/ops.hpp"
#include "cmr/optimizer.hpp"
#include "cmr/params.hpp"
#include "cmr/relational_relevance.hpp"
#include "cmr/rng.hpp"
#include "cmr/synth_data.hpp"
#include "cmr/tensor.hpp"
#include "cmr/trainer.hpp"
