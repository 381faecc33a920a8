"""Ledger-based federated learning simulator with two-contract encrypted analysis."""
