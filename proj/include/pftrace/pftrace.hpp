#pragma once

#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"
#include "pftrace/nn.hpp"
#include "pftrace/poison.hpp"
#include "pftrace/projector.hpp"
#include "pftrace/cluster.hpp"
#include "pftrace/traceback.hpp"
#include "pftrace/eval.hpp"
#include "pftrace/campaign.hpp"
#include "pftrace/theory.hpp"
