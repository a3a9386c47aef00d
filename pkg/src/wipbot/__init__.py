"""Control stack and hybrid simulator for a jumping two-wheeled balancer."""

__version__ = "0.1.0"
