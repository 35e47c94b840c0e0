"""Data models for the training-time toolkit"""
