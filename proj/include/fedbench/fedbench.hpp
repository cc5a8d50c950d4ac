#pragma once

#include "fedbench/params.hpp"
#include "fedbench/data.hpp"
#include "fedbench/trigger.hpp"
#include "fedbench/update.hpp"
#include "fedbench/model.hpp"
#include "fedbench/attacks.hpp"
#include "fedbench/defenses.hpp"
#include "fedbench/metrics.hpp"
#include "fedbench/thread_pool.hpp"
#include "fedbench/checkpoint.hpp"
#include "fedbench/config.hpp"
#include "fedbench/engine.hpp"
