"""Initialization file for the wallet_transaction_api package."""
