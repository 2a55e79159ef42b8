"""Graph nodes for the analytic losses in :mod:`trajssl.losses`."""
from __future__ import annotations

from trajssl import losses
from trajssl.nn.tensor import Tensor, loss_node


def traj_loss(z_left: Tensor, z_center: Tensor, z_right: Tensor) -> Tensor:
    lv = losses.traj_loss(z_left.data, z_center.data, z_right.data)
    return loss_node([z_left, z_center, z_right], lv.value, lv.gradients)


def ntxent_loss(za: Tensor, zb: Tensor, temperature: float = 0.5) -> Tensor:
    lv = losses.ntxent_loss(za.data, zb.data, temperature)
    return loss_node([za, zb], lv.value, lv.gradients)


def vicreg_loss(za: Tensor, zb: Tensor, sim_coeff=25.0, var_coeff=25.0, cov_coeff=1.0) -> Tensor:
    lv = losses.vicreg_loss(za.data, zb.data, sim_coeff, var_coeff, cov_coeff)
    return loss_node([za, zb], lv.value, lv.gradients)
